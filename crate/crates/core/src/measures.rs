//! Time-dependent Radon measures on `]0, R[`, piecewise constant in time.
//!
//! A [`TimeMeasure`] is a list of time breakpoints with one
//! [`SpatialMeasure`] per interval. Each spatial measure is a finite set of
//! atoms plus an optional node-sampled density. On a [`Grid`] the measure is
//! reduced to [`StepMasses`]: the time-integrated node masses of every time
//! step, with atoms split between their two neighbouring nodes by the hat
//! functions. The solver and all pairings see exactly this discrete measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{close, Field, Grid};
use crate::model::FieldSpec;

/// Version of the probe family returned by [`standard_probes`].
pub const PROBE_SET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Atom {
    pub x: f64,
    pub mass: f64,
}

impl From<(f64, f64)> for Atom {
    fn from((x, mass): (f64, f64)) -> Self {
        Atom { x, mass }
    }
}

impl From<Atom> for (f64, f64) {
    fn from(a: Atom) -> Self {
        (a.x, a.mass)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialMeasure {
    #[serde(default)]
    pub atoms: Vec<Atom>,
    /// Density on uniform nodes of `[0, R]` (at least two nodes).
    #[serde(default)]
    pub density: Option<Vec<f64>>,
}

fn lerp_nodes(values: &[f64], x: f64, r: f64) -> f64 {
    let cells = (values.len() - 1) as f64;
    let u = (x / r * cells).clamp(0.0, cells);
    let i = (u.floor() as usize).min(values.len() - 2);
    let w = u - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

fn trapezoid(values: &[f64], r: f64) -> f64 {
    let h = r / (values.len() - 1) as f64;
    let inner: f64 = values.iter().sum();
    h * (inner - 0.5 * (values[0] + values[values.len() - 1]))
}

impl SpatialMeasure {
    pub fn zero() -> Self {
        SpatialMeasure::default()
    }

    pub fn atom(x: f64, mass: f64) -> Self {
        SpatialMeasure { atoms: vec![Atom { x, mass }], density: None }
    }

    pub fn atoms(atoms: impl IntoIterator<Item = (f64, f64)>) -> Self {
        SpatialMeasure { atoms: atoms.into_iter().map(Atom::from).collect(), density: None }
    }

    pub fn density(values: Vec<f64>) -> Self {
        SpatialMeasure { atoms: Vec::new(), density: Some(values) }
    }

    /// `sum |m_a| + int |rho| dx` (trapezoid on the density nodes).
    pub fn total_variation(&self, r: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.mass.abs()).sum();
        let dens = self.density.as_ref().map_or(0.0, |d| {
            let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            trapezoid(&abs, r)
        });
        atoms + dens
    }

    pub fn is_nonnegative(&self) -> bool {
        self.atoms.iter().all(|a| a.mass >= 0.0) && self.density.as_ref().is_none_or(|d| d.iter().all(|&v| v >= 0.0))
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.mass == 0.0) && self.density.as_ref().is_none_or(|d| d.iter().all(|&v| v == 0.0))
    }

    pub fn scaled(&self, a: f64) -> Self {
        SpatialMeasure {
            atoms: self.atoms.iter().map(|at| Atom { x: at.x, mass: a * at.mass }).collect(),
            density: self.density.as_ref().map(|d| d.iter().map(|v| a * v).collect()),
        }
    }

    /// `a * self + b * other`; coincident atoms are merged.
    pub fn combine(a: f64, p: &SpatialMeasure, b: f64, q: &SpatialMeasure) -> SpatialMeasure {
        let mut atoms: Vec<Atom> = Vec::with_capacity(p.atoms.len() + q.atoms.len());
        for (s, atom) in p.atoms.iter().map(|x| (a, x)).chain(q.atoms.iter().map(|x| (b, x))) {
            let m = s * atom.mass;
            if let Some(existing) = atoms.iter_mut().find(|e| e.x == atom.x) {
                existing.mass += m;
            } else {
                atoms.push(Atom { x: atom.x, mass: m });
            }
        }
        atoms.retain(|at| at.mass != 0.0);
        let density = match (&p.density, &q.density) {
            (None, None) => None,
            (Some(d), None) => Some(d.iter().map(|v| a * v).collect()),
            (None, Some(d)) => Some(d.iter().map(|v| b * v).collect()),
            (Some(d1), Some(d2)) => {
                let n = d1.len().max(d2.len());
                let at = |d: &[f64], i: usize| lerp_nodes(d, i as f64 / (n - 1) as f64, 1.0);
                Some((0..n).map(|i| a * at(d1, i) + b * at(d2, i)).collect())
            }
        };
        SpatialMeasure { atoms, density }
    }

    /// Node masses on the grid: hat-split atoms plus `w_i * rho(x_i)`.
    pub fn node_masses(&self, grid: &Grid) -> Vec<f64> {
        let mut out = vec![0.0; grid.n_x];
        for a in &self.atoms {
            let (i, lam) = grid.locate(a.x);
            out[i] += (1.0 - lam) * a.mass;
            out[i + 1] += lam * a.mass;
        }
        if let Some(d) = &self.density {
            let w = grid.weights();
            for (i, o) in out.iter_mut().enumerate() {
                *o += w[i] * lerp_nodes(d, grid.x(i), grid.r);
            }
        }
        out
    }

    fn check(&self, r: f64, what: &str) -> Result<()> {
        for a in &self.atoms {
            if !(a.x.is_finite() && a.mass.is_finite()) {
                return Err(Error::invalid(format!("{what}: non-finite atom ({}, {})", a.x, a.mass)));
            }
            if a.x < 0.0 || a.x > r {
                return Err(Error::DomainMismatch(format!("{what}: atom at x={} outside [0, {r}]", a.x)));
            }
        }
        if let Some(d) = &self.density {
            if d.len() < 2 {
                return Err(Error::invalid(format!("{what}: density needs at least two nodes")));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{what}: non-finite density value")));
            }
        }
        Ok(())
    }
}

/// On-disk layout of a measure document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    #[serde(rename = "R")]
    pub r: f64,
    pub breakpoints: Vec<f64>,
    pub slices: Vec<SpatialMeasure>,
}

/// Piecewise-constant-in-time measure `t -> mu_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureFile", into = "MeasureFile")]
pub struct TimeMeasure {
    r: f64,
    breakpoints: Vec<f64>,
    slices: Vec<SpatialMeasure>,
}

impl TryFrom<MeasureFile> for TimeMeasure {
    type Error = Error;
    fn try_from(f: MeasureFile) -> Result<Self> {
        TimeMeasure::new(f.r, f.breakpoints, f.slices)
    }
}

impl From<TimeMeasure> for MeasureFile {
    fn from(m: TimeMeasure) -> Self {
        MeasureFile { r: m.r, breakpoints: m.breakpoints, slices: m.slices }
    }
}

impl TimeMeasure {
    pub fn new(r: f64, breakpoints: Vec<f64>, slices: Vec<SpatialMeasure>) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::invalid(format!("measure domain length must be positive, got {r}")));
        }
        if breakpoints.len() < 2 || breakpoints[0] != 0.0 {
            return Err(Error::invalid("breakpoints must start at 0 and contain at least two entries"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::invalid("breakpoints must be finite and strictly increasing"));
        }
        if slices.len() != breakpoints.len() - 1 {
            return Err(Error::invalid(format!(
                "{} breakpoints need {} slices, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                slices.len()
            )));
        }
        for (k, s) in slices.iter().enumerate() {
            s.check(r, &format!("slice {k}"))?;
        }
        Ok(TimeMeasure { r, breakpoints, slices })
    }

    pub fn zero(r: f64, horizon: f64) -> Self {
        TimeMeasure { r, breakpoints: vec![0.0, horizon], slices: vec![SpatialMeasure::zero()] }
    }

    /// One slice covering the whole horizon.
    pub fn constant_in_time(r: f64, horizon: f64, slice: SpatialMeasure) -> Result<Self> {
        TimeMeasure::new(r, vec![0.0, horizon], vec![slice])
    }

    /// Slices of equal length.
    pub fn uniform(r: f64, horizon: f64, slices: Vec<SpatialMeasure>) -> Result<Self> {
        let k = slices.len();
        if k == 0 {
            return Err(Error::invalid("need at least one slice"));
        }
        let mut bps: Vec<f64> = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
        bps[k] = horizon;
        TimeMeasure::new(r, bps, slices)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().expect("non-empty")
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slices(&self) -> &[SpatialMeasure] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> Option<&SpatialMeasure> {
        self.slices.get(k)
    }

    pub fn slice_tv(&self, k: usize) -> f64 {
        self.slices[k].total_variation(self.r)
    }

    /// Essential supremum in time of the total variation: the largest slice TV.
    pub fn total_variation_sup(&self) -> f64 {
        (0..self.slices.len()).map(|k| self.slice_tv(k)).fold(0.0, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.slices.iter().all(SpatialMeasure::is_nonnegative)
    }

    pub fn scaled(&self, a: f64) -> TimeMeasure {
        TimeMeasure {
            r: self.r,
            breakpoints: self.breakpoints.clone(),
            slices: self.slices.iter().map(|s| s.scaled(a)).collect(),
        }
    }

    fn slice_index_at(&self, t: f64) -> usize {
        match self.breakpoints.binary_search_by(|b| b.partial_cmp(&t).expect("finite")) {
            Ok(k) => k.min(self.slices.len() - 1),
            Err(k) => k.saturating_sub(1).min(self.slices.len() - 1),
        }
    }

    /// `a * self + b * other` on the common refinement of both partitions.
    pub fn combine(a: f64, p: &TimeMeasure, b: f64, q: &TimeMeasure) -> Result<TimeMeasure> {
        if !close(p.r, q.r) || !close(p.horizon(), q.horizon()) {
            return Err(Error::DomainMismatch("measures live on different boxes".into()));
        }
        let mut bps: Vec<f64> = p.breakpoints.iter().chain(&q.breakpoints).copied().collect();
        bps.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        bps.dedup_by(|x, y| close(*x, *y));
        let horizon = p.horizon();
        *bps.last_mut().expect("non-empty") = horizon;
        let slices = bps
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                SpatialMeasure::combine(a, &p.slices[p.slice_index_at(mid)], b, &q.slices[q.slice_index_at(mid)])
            })
            .collect();
        TimeMeasure::new(p.r, bps, slices)
    }

    /// Time-integrated node masses of every grid step.
    pub fn discretize(&self, grid: &Grid) -> Result<StepMasses> {
        if !grid.same_box(self.r, self.horizon()) {
            return Err(Error::DomainMismatch(format!(
                "measure box [0,{}]x[0,{}] vs grid [0,{}]x[0,{}]",
                self.horizon(),
                self.r,
                grid.t,
                grid.r
            )));
        }
        let mut out = StepMasses::zeros(*grid);
        let dt = grid.dt();
        for (k, slice) in self.slices.iter().enumerate() {
            if slice.is_zero() {
                continue;
            }
            let (lo, hi) = (self.breakpoints[k], self.breakpoints[k + 1]);
            let masses = slice.node_masses(grid);
            let first = ((lo / dt).floor() as usize).min(grid.n_t - 1);
            let last = ((hi / dt).ceil() as usize).min(grid.n_t);
            for n in first..last {
                let overlap = (grid.time(n + 1).min(hi) - grid.time(n).max(lo)).max(0.0);
                if overlap > 0.0 {
                    for (q, m) in out.step_mut(n).iter_mut().zip(&masses) {
                        *q += overlap * m;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `int_0^T int_0^R field d mu_t dt` on the field's grid. Atoms see the
    /// linear interpolant of the field, densities the trapezoid rule, and each
    /// time step uses the end-of-step trace of the field.
    pub fn pair(&self, field: &Field) -> Result<f64> {
        Ok(self.discretize(field.grid())?.pair(field))
    }

    /// `sup_{t in slice k} int_0^R b(t, .) d mu_t`. The constraint holds when
    /// this is at most one.
    pub fn budget_value(&self, budget: &FieldSpec, k: usize) -> Result<f64> {
        let slice = self
            .slices
            .get(k)
            .ok_or_else(|| Error::invalid(format!("slice index {k} out of range ({} slices)", self.slices.len())))?;
        let (lo, hi) = (self.breakpoints[k], self.breakpoints[k + 1]);
        let horizon = self.horizon();
        let mut times = vec![lo, hi];
        times.extend(budget.time_nodes(horizon).into_iter().filter(|&t| t > lo && t < hi));
        let mut worst = f64::NEG_INFINITY;
        for t in times {
            let mut v = 0.0;
            for a in &slice.atoms {
                let b = budget.eval(t, a.x, self.r, horizon);
                if !b.is_finite() {
                    return Err(Error::DomainMismatch(format!("budget undefined at atom x={}", a.x)));
                }
                v += b * a.mass;
            }
            if let Some(d) = &slice.density {
                let n = d.len();
                let prod: Vec<f64> = (0..n)
                    .map(|i| {
                        let x = self.r * i as f64 / (n - 1) as f64;
                        budget.eval(t, x, self.r, horizon) * d[i]
                    })
                    .collect();
                v += trapezoid(&prod, self.r);
            }
            worst = worst.max(v);
        }
        Ok(worst)
    }
}

/// Discrete measure on a grid: row `n` holds the node masses of step
/// `[t_n, t_{n+1}]`, integrated in time.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMasses {
    grid: Grid,
    q: Vec<f64>,
}

impl StepMasses {
    pub fn zeros(grid: Grid) -> Self {
        StepMasses { grid, q: vec![0.0; grid.n_t * grid.n_x] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn step(&self, n: usize) -> &[f64] {
        let nx = self.grid.n_x;
        &self.q[n * nx..(n + 1) * nx]
    }

    pub fn step_mut(&mut self, n: usize) -> &mut [f64] {
        let nx = self.grid.n_x;
        &mut self.q[n * nx..(n + 1) * nx]
    }

    pub fn raw(&self) -> &[f64] {
        &self.q
    }

    /// `sum_n q^n . field^{n+1}`.
    pub fn pair(&self, field: &Field) -> f64 {
        (0..self.grid.n_t).map(|n| self.step(n).iter().zip(field.trace(n + 1)).map(|(q, f)| q * f).sum::<f64>()).sum()
    }

    /// Node densities of step `n`: `q / (dt * w)`.
    pub fn densities_into(&self, n: usize, weights: &[f64], out: &mut [f64]) {
        let dt = self.grid.dt();
        for ((o, q), w) in out.iter_mut().zip(self.step(n)).zip(weights) {
            *o = q / (dt * w);
        }
    }

    pub fn add_scaled(&mut self, a: f64, other: &StepMasses) {
        for (x, y) in self.q.iter_mut().zip(&other.q) {
            *x += a * y;
        }
    }

    pub fn combine(a: f64, p: &StepMasses, b: f64, q: &StepMasses) -> StepMasses {
        StepMasses { grid: p.grid, q: p.q.iter().zip(&q.q).map(|(x, y)| a * x + b * y).collect() }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.q.iter().all(|&v| v >= 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().all(|&v| v == 0.0)
    }
}

/// `max_probe |<mu, probe> - <nu, probe>|`.
pub fn weakstar_distance(mu: &TimeMeasure, nu: &TimeMeasure, probes: &[Field]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut cache: Option<(Grid, StepMasses)> = None;
    for probe in probes {
        let grid = *probe.grid();
        let diff = match &cache {
            Some((g, d)) if *g == grid => d.clone(),
            _ => {
                let d = StepMasses::combine(1.0, &mu.discretize(&grid)?, -1.0, &nu.discretize(&grid)?);
                cache = Some((grid, d.clone()));
                d
            }
        };
        worst = worst.max(diff.pair(probe).abs());
    }
    Ok(worst)
}

/// Same distance for measures already reduced to a grid.
pub fn weakstar_distance_masses(mu: &StepMasses, nu: &StepMasses, probes: &[Field]) -> f64 {
    let diff = StepMasses::combine(1.0, mu, -1.0, nu);
    probes.iter().map(|p| diff.pair(p).abs()).fold(0.0, f64::max)
}

/// Probe family (version [`PROBE_SET_VERSION`]): the constant, four cosine
/// modes in space, three space-time cosine products and a 9 x 5 lattice of
/// space-time tents. Every probe is bounded by one and Lipschitz.
pub fn standard_probes(grid: &Grid) -> Vec<Field> {
    use std::f64::consts::PI;
    let (r, horizon) = (grid.r, grid.t);
    let mut probes = vec![Field::constant(*grid, 1.0)];
    for k in 1..=4 {
        probes.push(Field::from_fn(*grid, |_, x| (k as f64 * PI * x / r).cos()));
    }
    for k in 0..=2 {
        probes.push(Field::from_fn(*grid, |t, x| (PI * t / horizon).cos() * (k as f64 * PI * x / r).cos()));
    }
    let tent = |s: f64, c: f64, w: f64| (1.0 - (s - c).abs() / w).max(0.0);
    for j in 0..=4 {
        let ct = horizon * j as f64 / 4.0;
        for i in 0..=8 {
            let cx = r * i as f64 / 8.0;
            probes.push(Field::from_fn(*grid, |t, x| tent(t, ct, horizon / 4.0) * tent(x, cx, r / 8.0)));
        }
    }
    probes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(1.0, 1.0, 41, 20).unwrap()
    }

    #[test]
    fn zero_measure_pairs_to_zero() {
        let f = Field::from_fn(grid(), |t, x| 3.0 + t * x);
        assert_eq!(TimeMeasure::zero(1.0, 1.0).pair(&f).unwrap(), 0.0);
    }

    #[test]
    fn atom_against_constant_field() {
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.37, 0.8)).unwrap();
        let v = mu.pair(&Field::constant(grid(), 1.0)).unwrap();
        assert!((v - 0.8).abs() < 1e-14);
    }

    #[test]
    fn atom_against_linear_field() {
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.25, 2.0)).unwrap();
        let g = Grid::new(1.0, 1.0, 7, 5).unwrap();
        let v = mu.pair(&Field::from_fn(g, |_, x| x)).unwrap();
        // hand quadrature: 2 * 0.25 * T
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pairing_rejects_other_boxes() {
        let mu = TimeMeasure::zero(2.0, 1.0);
        assert!(matches!(mu.pair(&Field::constant(grid(), 1.0)), Err(Error::DomainMismatch(_))));
    }

    #[test]
    fn total_variation_examples() {
        let s = SpatialMeasure::atoms([(0.3, 0.3), (0.7, 0.2)]);
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, s).unwrap();
        assert!((mu.total_variation_sup() - 0.5).abs() < 1e-15);

        let mu = TimeMeasure::uniform(1.0, 1.0, vec![SpatialMeasure::atom(0.5, 0.1), SpatialMeasure::atom(0.5, -0.4)])
            .unwrap();
        assert!((mu.total_variation_sup() - 0.4).abs() < 1e-15);

        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::density(vec![1.0; 101])).unwrap();
        assert!((mu.total_variation_sup() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_examples() {
        let b0 = 4.0;
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atoms([(0.2, 0.1), (0.9, 0.15)])).unwrap();
        assert_eq!(mu.budget_value(&FieldSpec::Scalar(b0), 0).unwrap(), 1.0);

        assert_eq!(TimeMeasure::zero(1.0, 1.0).budget_value(&FieldSpec::Scalar(3.0), 0).unwrap(), 0.0);

        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.5, 0.4)).unwrap();
        let b = FieldSpec::Profile(vec![1.0, 2.0]);
        assert!((mu.budget_value(&b, 0).unwrap() - 0.6).abs() < 1e-15);

        assert!(mu.budget_value(&b, 3).is_err());
    }

    #[test]
    fn budget_takes_sup_over_time_in_slice() {
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.5, 0.5)).unwrap();
        let b = FieldSpec::Table(vec![vec![1.0], vec![3.0], vec![2.0]]);
        assert!((mu.budget_value(&b, 0).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_malformed_measures() {
        assert!(TimeMeasure::new(1.0, vec![0.0, 0.5, 0.5], vec![SpatialMeasure::zero(); 2]).is_err());
        assert!(TimeMeasure::new(1.0, vec![0.0, 1.0], vec![SpatialMeasure::atom(1.5, 1.0)]).is_err());
        assert!(TimeMeasure::new(1.0, vec![0.0, 1.0], vec![]).is_err());
        assert!(TimeMeasure::new(1.0, vec![0.0, 1.0], vec![SpatialMeasure::density(vec![1.0])]).is_err());
    }

    #[test]
    fn weakstar_distance_examples() {
        let g = grid();
        let probes = standard_probes(&g);
        let mu = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.5, 0.3)).unwrap();
        assert_eq!(weakstar_distance(&mu, &mu, &probes).unwrap(), 0.0);

        let zero = TimeMeasure::zero(1.0, 1.0);
        let d = weakstar_distance(&mu, &zero, &[Field::constant(g, 1.0)]).unwrap();
        assert!((d - 0.3).abs() < 1e-14);
    }

    #[test]
    fn split_atom_converges_weakly_at_first_order() {
        // Taylor bound: |<delta_x - (delta_{x-e} + delta_{x+e})/2, f>| <= Lip(f) e
        let g = Grid::new(1.0, 1.0, 801, 4).unwrap();
        let probes = standard_probes(&g);
        let one = TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atom(0.5, 1.0)).unwrap();
        let lip = 8.0 + 4.0 * std::f64::consts::PI;
        let mut prev = f64::INFINITY;
        for e in [0.1, 0.05, 0.025, 0.0125] {
            let split =
                TimeMeasure::constant_in_time(1.0, 1.0, SpatialMeasure::atoms([(0.5 - e, 0.5), (0.5 + e, 0.5)]))
                    .unwrap();
            let d = weakstar_distance(&one, &split, &probes).unwrap();
            assert!(d <= lip * e + 1e-12, "d={d} e={e}");
            assert!(d <= prev + 1e-15);
            prev = d;
        }
    }

    #[test]
    fn combine_refines_partitions() {
        let a = TimeMeasure::uniform(1.0, 1.0, vec![SpatialMeasure::atom(0.2, 1.0), SpatialMeasure::zero()]).unwrap();
        let b = TimeMeasure::new(
            1.0,
            vec![0.0, 0.25, 1.0],
            vec![SpatialMeasure::atom(0.2, 1.0), SpatialMeasure::atom(0.6, 2.0)],
        )
        .unwrap();
        let c = TimeMeasure::combine(1.0, &a, -1.0, &b).unwrap();
        assert_eq!(c.breakpoints(), &[0.0, 0.25, 0.5, 1.0]);
        assert!(c.slice(0).unwrap().is_zero());
        assert_eq!(c.slice(1).unwrap().atoms.len(), 2);
        assert!((c.slice_tv(2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn discretize_splits_partial_steps() {
        let g = Grid::new(1.0, 1.0, 11, 4).unwrap();
        let mu =
            TimeMeasure::new(1.0, vec![0.0, 0.3, 1.0], vec![SpatialMeasure::atom(0.5, 1.0), SpatialMeasure::zero()])
                .unwrap();
        let q = mu.discretize(&g).unwrap();
        assert!((q.step(0)[5] - 0.25).abs() < 1e-15);
        assert!((q.step(1)[5] - 0.05).abs() < 1e-15);
        assert_eq!(q.step(2)[5], 0.0);
    }

    #[test]
    fn measure_file_round_trip() {
        let mu = TimeMeasure::uniform(
            1.0,
            2.0,
            vec![SpatialMeasure::atom(0.5, 0.1), SpatialMeasure::density(vec![0.0, 1.0, 0.0])],
        )
        .unwrap();
        let text = serde_json::to_string(&mu).unwrap();
        assert!(text.contains("\"breakpoints\""));
        let back: TimeMeasure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mu);
        assert!(serde_json::from_str::<TimeMeasure>(r#"{"R":1,"breakpoints":[0,1],"slices":[]}"#).is_err());
    }
}
