//! Finite-difference solver for the controlled logistic equation, its first
//! and second variations along a measure direction, and the backward adjoint.
//!
//! One step of the forward scheme solves
//!
//! ```text
//! B_n phi^{n+1} = E phi^n,
//! B_n = I - theta dt L + diag(q^n / w) - dt diag(alpha^{n+1} (h^{n+1} - phi^n)),
//! E   = I + (1 - theta) dt L,
//! ```
//!
//! where `L` is the ghost-node Neumann Laplacian, `q^n` the step masses of the
//! control and `w` the trapezoid weights. The measure term is implicit and the
//! reaction semi-implicit, so each step is one tridiagonal solve. The tangent,
//! second variation and adjoint are the exact derivatives and transpose of this
//! discrete map, which makes every pairing identity hold to roundoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::measures::{StepMasses, TimeMeasure};
use crate::model::{FieldSpec, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Implicitness of the diffusion, in `[0.5, 1]`.
    pub theta: f64,
    pub max_picard: usize,
    pub tol_picard: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { theta: 1.0, max_picard: 200, tol_picard: 1e-10 }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!("theta must lie in [0.5, 1], got {}", self.theta)));
        }
        if self.max_picard == 0 || !(self.tol_picard > 0.0) {
            return Err(Error::invalid("Picard cap and tolerance must be positive"));
        }
        Ok(())
    }
}

/// Tridiagonal system solved by the Thomas algorithm; `sub[0]` and
/// `sup[n-1]` are unused.
struct Tridiag {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    scratch: Vec<f64>,
}

impl Tridiag {
    fn new(n: usize) -> Self {
        Tridiag { sub: vec![0.0; n], diag: vec![0.0; n], sup: vec![0.0; n], scratch: vec![0.0; n] }
    }

    fn transpose_in_place(&mut self) {
        let n = self.diag.len();
        let (sub, sup) = (self.sub.clone(), self.sup.clone());
        for i in 0..n {
            self.sub[i] = if i > 0 { sup[i - 1] } else { 0.0 };
            self.sup[i] = if i + 1 < n { sub[i + 1] } else { 0.0 };
        }
    }

    fn solve(&mut self, rhs: &[f64], out: &mut [f64], step: usize) -> Result<()> {
        let n = self.diag.len();
        let c = &mut self.scratch;
        let mut pivot = self.diag[0];
        if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
            return Err(Error::IllConditioned { step, detail: format!("zero pivot at node 0 ({pivot:e})") });
        }
        c[0] = self.sup[0] / pivot;
        out[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.sub[i] * c[i - 1];
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(Error::IllConditioned { step, detail: format!("zero pivot at node {i} ({pivot:e})") });
            }
            c[i] = if i + 1 < n { self.sup[i] / pivot } else { 0.0 };
            out[i] = (rhs[i] - self.sub[i] * out[i - 1]) / pivot;
        }
        for i in (0..n - 1).rev() {
            out[i] -= c[i] * out[i + 1];
        }
        Ok(())
    }
}

/// Model data sampled on a grid, ready for repeated solves.
#[derive(Clone, Debug)]
pub struct Dynamics {
    grid: Grid,
    theta: f64,
    alpha: Vec<f64>,
    h: Vec<f64>,
    phi0: Vec<f64>,
    w: Vec<f64>,
    /// `dt / dx^2`
    ratio: f64,
}

impl Dynamics {
    pub fn new(params: &ModelParams, grid: &Grid, options: &SolveOptions) -> Result<Self> {
        options.validate()?;
        if !grid.same_box(params.r, params.t) {
            return Err(Error::DomainMismatch(format!(
                "grid box [0,{}]x[0,{}] vs scenario [0,{}]x[0,{}]",
                grid.t, grid.r, params.t, params.r
            )));
        }
        let phi0: Vec<f64> = (0..grid.n_x).map(|i| params.phi0_at(grid.x(i))).collect();
        Ok(Dynamics {
            grid: *grid,
            theta: options.theta,
            alpha: params.alpha.sample(grid),
            h: params.h.sample(grid),
            phi0,
            w: grid.weights(),
            ratio: grid.dt() / (grid.dx() * grid.dx()),
        })
    }

    /// Same dynamics with a different initial datum.
    pub fn with_phi0(&self, phi0: &FieldSpec, r: f64, horizon: f64) -> Self {
        let mut d = self.clone();
        d.phi0 = (0..self.grid.n_x).map(|i| phi0.eval(0.0, self.grid.x(i), r, horizon)).collect();
        d
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn phi0(&self) -> &[f64] {
        &self.phi0
    }

    fn level<'a>(&self, v: &'a [f64], n: usize) -> &'a [f64] {
        let nx = self.grid.n_x;
        &v[n * nx..(n + 1) * nx]
    }

    /// `out = E v` (or `E^T v`).
    fn apply_explicit(&self, v: &[f64], out: &mut [f64], transpose: bool) {
        let c = (1.0 - self.theta) * self.ratio;
        out.copy_from_slice(v);
        if c == 0.0 {
            return;
        }
        let n = v.len();
        // rows of the ghost-node Laplacian as (row, column, weight)
        let mut add = |i: usize, j: usize, val: f64| {
            if transpose {
                out[j] += c * val * v[i];
            } else {
                out[i] += c * val * v[j];
            }
        };
        add(0, 0, -2.0);
        add(0, 1, 2.0);
        for i in 1..n - 1 {
            add(i, i - 1, 1.0);
            add(i, i, -2.0);
            add(i, i + 1, 1.0);
        }
        add(n - 1, n - 2, 2.0);
        add(n - 1, n - 1, -2.0);
    }

    /// Assembles `B_n` given the extra diagonal `s` (already multiplied by dt).
    fn assemble(&self, sys: &mut Tridiag, s: impl Fn(usize) -> f64) {
        let c = self.theta * self.ratio;
        let n = self.grid.n_x;
        for i in 0..n {
            sys.diag[i] = 1.0 + 2.0 * c + s(i);
            sys.sub[i] = if i == 0 {
                0.0
            } else if i + 1 == n {
                -2.0 * c
            } else {
                -c
            };
            sys.sup[i] = if i + 1 == n {
                0.0
            } else if i == 0 {
                -2.0 * c
            } else {
                -c
            };
        }
    }

    fn check_diagonal(&self, step: usize, s: impl Fn(usize) -> f64) -> Result<()> {
        for i in 0..self.grid.n_x {
            let d = 1.0 + s(i);
            if !(d > 1e-12) {
                return Err(Error::IllConditioned {
                    step,
                    detail: format!("reaction overwhelms the step at x={} (1 + s = {d:e}); refine n_t", self.grid.x(i)),
                });
            }
        }
        Ok(())
    }

    /// Forward solve with coefficient masses `q`.
    pub fn forward(&self, q: &StepMasses) -> Result<Field> {
        self.march(q, None)
    }

    /// One pass of the frozen-coefficient scheme: the reaction on step `n`
    /// uses `frozen` at level `n` instead of the running solution.
    fn march(&self, q: &StepMasses, frozen: Option<&Field>) -> Result<Field> {
        let g = self.grid;
        let nx = g.n_x;
        let dt = g.dt();
        let mut field = Field::zeros(g);
        field.trace_mut(0).copy_from_slice(&self.phi0);
        let mut sys = Tridiag::new(nx);
        let mut rhs = vec![0.0; nx];
        let mut next = vec![0.0; nx];
        for n in 0..g.n_t {
            let prev = field.trace(n).to_vec();
            let lag = frozen.map_or(&prev[..], |f| f.trace(n));
            let (alpha, h, qn) = (self.level(&self.alpha, n + 1), self.level(&self.h, n + 1), q.step(n));
            let s = |i: usize| qn[i] / self.w[i] - dt * alpha[i] * (h[i] - lag[i]);
            self.check_diagonal(n, s)?;
            self.assemble(&mut sys, s);
            self.apply_explicit(&prev, &mut rhs, false);
            sys.solve(&rhs, &mut next, n)?;
            field.trace_mut(n + 1).copy_from_slice(&next);
        }
        Ok(field)
    }

    /// Frozen-coefficient Picard sequence started from `phi0` held constant
    /// in time. Returns the limit and the number of sweeps.
    pub fn iterate_frozen(&self, q: &StepMasses, options: &SolveOptions) -> Result<(Field, usize)> {
        let g = self.grid;
        let mut current = Field::zeros(g);
        for n in 0..=g.n_t {
            current.trace_mut(n).copy_from_slice(&self.phi0);
        }
        for sweep in 1..=options.max_picard {
            let next = self.march(q, Some(&current))?;
            let change = next.difference(&current)?.l2_space_time();
            current = next;
            if change < options.tol_picard {
                return Ok((current, sweep));
            }
            if sweep == options.max_picard {
                return Err(Error::NotConverged { iterations: sweep, last_change: change });
            }
        }
        unreachable!("loop returns on its last sweep")
    }

    /// First variation along the direction with step masses `q_nu`.
    pub fn tangent(&self, q: &StepMasses, phi: &Field, q_nu: &StepMasses) -> Result<Field> {
        self.variation(q, phi, |n, i, _| -q_nu.step(n)[i] / self.w[i] * phi.get(n + 1, i))
    }

    /// Second variation along `q_nu` given the first variation `phi1`.
    pub fn second(&self, q: &StepMasses, phi: &Field, q_nu: &StepMasses, phi1: &Field) -> Result<Field> {
        let dt = self.grid.dt();
        self.variation(q, phi, |n, i, alpha_i| {
            -2.0 * q_nu.step(n)[i] / self.w[i] * phi1.get(n + 1, i)
                - 2.0 * dt * alpha_i * phi1.get(n, i) * phi1.get(n + 1, i)
        })
    }

    /// Solves `B_n v^{n+1} = K_n v^n + src(n, i, alpha_i)` from `v^0 = 0`,
    /// `K_n = E - dt diag(alpha^{n+1} phi^{n+1})`.
    fn variation(&self, q: &StepMasses, phi: &Field, src: impl Fn(usize, usize, f64) -> f64) -> Result<Field> {
        let g = self.grid;
        let (nx, dt) = (g.n_x, g.dt());
        let mut out = Field::zeros(g);
        let mut sys = Tridiag::new(nx);
        let mut rhs = vec![0.0; nx];
        let mut next = vec![0.0; nx];
        for n in 0..g.n_t {
            let (alpha, h, qn) = (self.level(&self.alpha, n + 1), self.level(&self.h, n + 1), q.step(n));
            let (cur, lag, new) = (out.trace(n), phi.trace(n), phi.trace(n + 1));
            let s = |i: usize| qn[i] / self.w[i] - dt * alpha[i] * (h[i] - lag[i]);
            self.check_diagonal(n, s)?;
            self.assemble(&mut sys, s);
            self.apply_explicit(cur, &mut rhs, false);
            for i in 0..nx {
                rhs[i] += -dt * alpha[i] * new[i] * cur[i] + src(n, i, alpha[i]);
            }
            sys.solve(&rhs, &mut next, n)?;
            out.trace_mut(n + 1).copy_from_slice(&next);
        }
        Ok(out)
    }

    /// Adjoint density `p` such that, for every direction,
    /// `pair(source, phi1) = -pair(nu, p * phi)`. `q` are the masses driving
    /// the dynamics, `source` the masses whose harvest is differentiated.
    /// Level 0 holds the sensitivity to the initial datum.
    pub fn adjoint(&self, q: &StepMasses, phi: &Field, source: &StepMasses) -> Result<Field> {
        let g = self.grid;
        let (nx, nt, dt) = (g.n_x, g.n_t, g.dt());
        let mut lambda = vec![0.0; nx];
        let mut out = Field::zeros(g);
        let mut sys = Tridiag::new(nx);
        let mut rhs = vec![0.0; nx];
        let mut carry = vec![0.0; nx];
        for n in (0..nt).rev() {
            // lambda^{n+1} = B_n^{-T} (source^n + K_{n+1}^T lambda^{n+2})
            for i in 0..nx {
                rhs[i] = source.step(n)[i] + carry[i];
            }
            let (alpha, h, qn, lag) =
                (self.level(&self.alpha, n + 1), self.level(&self.h, n + 1), q.step(n), phi.trace(n));
            let s = |i: usize| qn[i] / self.w[i] - dt * alpha[i] * (h[i] - lag[i]);
            self.check_diagonal(n, s)?;
            self.assemble(&mut sys, s);
            sys.transpose_in_place();
            sys.solve(&rhs, &mut lambda, n)?;
            for i in 0..nx {
                out.trace_mut(n + 1)[i] = lambda[i] / self.w[i];
            }
            // carry = K_n^T lambda^{n+1}
            self.apply_explicit(&lambda, &mut carry, true);
            let new = phi.trace(n + 1);
            for i in 0..nx {
                carry[i] -= dt * alpha[i] * new[i] * lambda[i];
            }
        }
        for i in 0..nx {
            out.trace_mut(0)[i] = carry[i] / self.w[i];
        }
        Ok(out)
    }
}

pub fn solve_forward(params: &ModelParams, mu: &TimeMeasure, grid: &Grid, options: &SolveOptions) -> Result<Field> {
    if !mu.is_nonnegative() {
        return Err(Error::Infeasible("the dynamics need a nonnegative measure".into()));
    }
    Dynamics::new(params, grid, options)?.forward(&mu.discretize(grid)?)
}

/// Frozen-coefficient iteration with a node-sampled coefficient density
/// `a >= 0`; step `n` uses the trace of `a` at level `n + 1`.
pub fn iterate_frozen(params: &ModelParams, a: &Field, grid: &Grid, options: &SolveOptions) -> Result<Field> {
    if a.grid() != grid {
        return Err(Error::DomainMismatch("coefficient field lives on another grid".into()));
    }
    if a.min() < 0.0 {
        return Err(Error::Infeasible("coefficient density must be nonnegative".into()));
    }
    let dynamics = Dynamics::new(params, grid, options)?;
    let mut q = StepMasses::zeros(*grid);
    let (dt, w) = (grid.dt(), grid.weights());
    for n in 0..grid.n_t {
        let level = a.trace(n + 1).to_vec();
        for ((qi, ai), wi) in q.step_mut(n).iter_mut().zip(level).zip(&w) {
            *qi = dt * wi * ai;
        }
    }
    Ok(dynamics.iterate_frozen(&q, options)?.0)
}

pub fn solve_phi1(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    nu: &TimeMeasure,
    phi_star: &Field,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<Field> {
    let dynamics = Dynamics::new(params, grid, options)?;
    dynamics.tangent(&mu_star.discretize(grid)?, phi_star, &nu.discretize(grid)?)
}

pub fn solve_phi2(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    nu: &TimeMeasure,
    phi_star: &Field,
    phi1: &Field,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<Field> {
    let dynamics = Dynamics::new(params, grid, options)?;
    dynamics.second(&mu_star.discretize(grid)?, phi_star, &nu.discretize(grid)?, phi1)
}

pub fn solve_adjoint(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    phi_star: &Field,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<Field> {
    let dynamics = Dynamics::new(params, grid, options)?;
    let q = mu_star.discretize(grid)?;
    dynamics.adjoint(&q, phi_star, &q)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    /// `L(t_n)` at every level.
    pub left: Vec<f64>,
    pub left_final: f64,
    /// `sup_t |mu_t - mu^_t|_TV^2 + |phi0 - phi0^|_{L^2}^2`
    pub data: f64,
    pub ratio: f64,
}

/// Left and right sides of the stability estimate for two data sets.
pub fn stability_gap(
    params: &ModelParams,
    mu: &TimeMeasure,
    mu_hat: &TimeMeasure,
    phi0_hat: &FieldSpec,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<GapReport> {
    let dynamics = Dynamics::new(params, grid, options)?;
    let hat = dynamics.with_phi0(phi0_hat, params.r, params.t);
    let phi = dynamics.forward(&mu.discretize(grid)?)?;
    let phi_hat = hat.forward(&mu_hat.discretize(grid)?)?;
    let diff = phi.difference(&phi_hat)?;
    let dt = grid.dt();
    let mut left = Vec::with_capacity(grid.n_t + 1);
    let mut grad = 0.0;
    for n in 0..=grid.n_t {
        if n > 0 {
            grad += dt * diff.grad_l2_at(n).powi(2);
        }
        left.push(diff.l2_at(n).powi(2) + grad);
    }
    let tv = TimeMeasure::combine(1.0, mu, -1.0, mu_hat)?.total_variation_sup();
    let w = grid.weights();
    let init: f64 = dynamics.phi0().iter().zip(hat.phi0()).zip(&w).map(|((a, b), w)| w * (a - b).powi(2)).sum();
    let data = tv * tv + init;
    let left_final = *left.last().expect("n_t >= 1");
    let ratio = if data > 0.0 {
        left_final / data
    } else if left_final == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(GapReport { left, left_final, data, ratio })
}
