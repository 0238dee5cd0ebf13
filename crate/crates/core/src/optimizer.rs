//! Conditional-gradient maximization of the payoff over budget-feasible
//! controls.
//!
//! Controls are searched among atoms at grid nodes, constant on time slices
//! made of whole solver steps. On each slice the feasible set is the weighted
//! simplex `sum_i u_i / cap_i <= 1` (see [`node_caps`]); its vertices are the
//! empty slice and single saturated atoms, so the linear subproblem picks one
//! atom per slice. Iterates move along pairwise (toward-vertex minus
//! away-vertex) directions with an exact line search on the scalar payoff.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measures::{standard_probes, weakstar_distance, SpatialMeasure, StepMasses, TimeMeasure};
use crate::model::ModelParams;
use crate::payoff::{
    concavity_certificate_with, direction_dictionary, euler_residual_with, h1_distance_to_equilibrium, node_caps,
    CertificateReport, DictionarySpec, GradientDensity, Objective, PayoffBreakdown, State,
};
use crate::solver::SolveOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Exact line search on `zeta -> J(mu + zeta d)` over `[0, 1]`.
    LineSearch,
    /// Classic open-loop step `2 / (k + 2)` toward the linear maximizer.
    Harmonic,
    /// Projected gradient with Barzilai-Borwein trial steps and the exact
    /// line search along the projected direction.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub fw_gap_tol: f64,
    pub step_rule: StepRule,
    /// Number of time slices of the control.
    pub slices: usize,
    /// Optional cap on the sup-in-time total variation.
    pub delta_cap: Option<f64>,
    pub dictionary: DictionarySpec,
    pub solve: SolveOptions,
    /// Seed for random starts in the uniqueness probe.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 2000,
            fw_gap_tol: 1e-7,
            step_rule: StepRule::Projected,
            slices: 20,
            delta_cap: None,
            dictionary: DictionarySpec::default(),
            solve: SolveOptions::default(),
            seed: 7,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fw_gap_tol > 0.0) {
            return Err(Error::invalid("fw_gap_tol must be positive"));
        }
        if let Some(d) = self.delta_cap {
            if !(d > 0.0) {
                return Err(Error::invalid("delta_cap must be positive"));
            }
        }
        if self.slices == 0 {
            return Err(Error::invalid("need at least one time slice"));
        }
        self.solve.validate()
    }
}

/// Time slices as ranges of solver steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slicing {
    /// Step index boundaries, `0 = s_0 < ... < s_K = n_t`.
    pub steps: Vec<usize>,
}

impl Slicing {
    /// `k` slices of nearly equal length (fewer if the grid has fewer steps).
    pub fn uniform(grid: &Grid, k: usize) -> Self {
        let k = k.clamp(1, grid.n_t);
        let mut steps: Vec<usize> = (0..=k).map(|j| (j * grid.n_t + k / 2) / k).collect();
        steps.dedup();
        *steps.last_mut().expect("non-empty") = grid.n_t;
        Slicing { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn breakpoints(&self, grid: &Grid) -> Vec<f64> {
        self.steps.iter().map(|&s| grid.time(s)).collect()
    }
}

/// Node masses per slice, `u[k * n_x + i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodalControl {
    pub slicing: Slicing,
    pub n_x: usize,
    pub u: Vec<f64>,
}

impl NodalControl {
    pub fn zero(slicing: Slicing, n_x: usize) -> Self {
        let len = slicing.len() * n_x;
        NodalControl { slicing, n_x, u: vec![0.0; len] }
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.u[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn to_masses(&self, grid: &Grid) -> StepMasses {
        let mut q = StepMasses::zeros(*grid);
        let dt = grid.dt();
        for k in 0..self.slicing.len() {
            for n in self.slicing.steps[k]..self.slicing.steps[k + 1] {
                for (qi, ui) in q.step_mut(n).iter_mut().zip(self.slice(k)) {
                    *qi = dt * ui;
                }
            }
        }
        q
    }

    pub fn to_measure(&self, grid: &Grid) -> TimeMeasure {
        let slices = (0..self.slicing.len())
            .map(|k| {
                SpatialMeasure::atoms(
                    self.slice(k).iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, &m)| (grid.x(i), m)),
                )
            })
            .collect();
        TimeMeasure::new(grid.r, self.slicing.breakpoints(grid), slices).expect("slicing is a valid partition")
    }

    pub fn combine(a: f64, p: &NodalControl, b: f64, q: &NodalControl) -> NodalControl {
        NodalControl {
            slicing: p.slicing.clone(),
            n_x: p.n_x,
            u: p.u.iter().zip(&q.u).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn sup_tv(&self) -> f64 {
        (0..self.slicing.len()).map(|k| self.slice(k).iter().sum::<f64>()).fold(0.0, f64::max)
    }
}

/// Feasible set and objective of one optimization problem.
pub(crate) struct Problem<'a> {
    pub obj: &'a Objective,
    pub params: &'a ModelParams,
    pub grid: Grid,
    pub slicing: Slicing,
    /// `caps[k][i]`
    pub caps: Vec<Vec<f64>>,
    pub config: &'a OptimizerConfig,
}

impl<'a> Problem<'a> {
    pub fn new(obj: &'a Objective, params: &'a ModelParams, config: &'a OptimizerConfig) -> Self {
        let grid = *obj.grid();
        let slicing = Slicing::uniform(&grid, config.slices);
        let bps = slicing.breakpoints(&grid);
        let caps = (0..slicing.len()).map(|k| node_caps(params, &grid, bps[k], bps[k + 1], config.delta_cap)).collect();
        Problem { obj, params, grid, slicing, caps, config }
    }

    fn scores(&self, g: &GradientDensity) -> Vec<f64> {
        let nx = self.grid.n_x;
        let dt = self.grid.dt();
        let mut out = vec![0.0; self.slicing.len() * nx];
        for k in 0..self.slicing.len() {
            for n in self.slicing.steps[k]..self.slicing.steps[k + 1] {
                for (o, v) in out[k * nx..(k + 1) * nx].iter_mut().zip(g.g.trace(n + 1)) {
                    *o += dt * v;
                }
            }
        }
        out
    }

    /// Linear maximizer on slice `k`: best node and its value, or `None`
    /// for the empty slice. Ties go to the smallest `x`.
    fn vertex(&self, k: usize, scores: &[f64]) -> Option<(usize, f64)> {
        let nx = self.grid.n_x;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..nx {
            let cap = self.caps[k][i];
            if cap <= 0.0 {
                continue;
            }
            let v = scores[k * nx + i] * cap;
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best
    }

    fn best_response_vertex(&self, scores: &[f64]) -> NodalControl {
        let mut s = NodalControl::zero(self.slicing.clone(), self.grid.n_x);
        for k in 0..self.slicing.len() {
            if let Some((i, _)) = self.vertex(k, scores) {
                s.u[k * self.grid.n_x + i] = self.caps[k][i];
            }
        }
        s
    }

    fn gap(&self, scores: &[f64], u: &NodalControl) -> f64 {
        let nx = self.grid.n_x;
        (0..self.slicing.len())
            .map(|k| {
                let top = self.vertex(k, scores).map_or(0.0, |(_, v)| v);
                let cur: f64 = u.slice(k).iter().zip(&scores[k * nx..(k + 1) * nx]).map(|(a, b)| a * b).sum();
                top - cur
            })
            .sum()
    }

    /// Pairwise direction: on every slice move the weight of the worst
    /// active vertex onto the linear maximizer.
    fn pairwise_direction(&self, scores: &[f64], u: &NodalControl) -> NodalControl {
        let nx = self.grid.n_x;
        let mut d = NodalControl::zero(self.slicing.clone(), nx);
        for k in 0..self.slicing.len() {
            let caps = &self.caps[k];
            let sk = &scores[k * nx..(k + 1) * nx];
            let uk = u.slice(k);
            let (toward, top) = match self.vertex(k, scores) {
                Some((i, v)) => (Some(i), v),
                None => (None, 0.0),
            };
            let used: f64 = uk.iter().zip(caps).filter(|(_, &c)| c > 0.0).map(|(m, c)| m / c).sum();
            let slack = 1.0 - used;
            // away vertex: lowest linear value among the active ones
            let mut away: Option<(Option<usize>, f64)> = if slack > 1e-14 { Some((None, 0.0)) } else { None };
            for i in 0..nx {
                if uk[i] > 0.0 && caps[i] > 0.0 {
                    let v = sk[i] * caps[i];
                    if away.is_none_or(|(_, a)| v < a) {
                        away = Some((Some(i), v));
                    }
                }
            }
            let Some((away_node, away_value)) = away else { continue };
            if top - away_value <= 0.0 || away_node == toward {
                continue;
            }
            let weight = match away_node {
                Some(i) => uk[i] / caps[i],
                None => slack,
            };
            let row = &mut d.u[k * nx..(k + 1) * nx];
            if let Some(i) = toward {
                row[i] += weight * caps[i];
            }
            if let Some(i) = away_node {
                row[i] -= uk[i];
            }
        }
        d
    }

    /// Snaps roundoff-sized masses to zero and restores feasibility;
    /// reports whether anything changed.
    fn clean(&self, u: &mut NodalControl) -> bool {
        let nx = self.grid.n_x;
        let mut changed = false;
        for k in 0..self.slicing.len() {
            let caps = &self.caps[k];
            let row = &mut u.u[k * nx..(k + 1) * nx];
            for (m, &c) in row.iter_mut().zip(caps) {
                if *m != 0.0 && (c <= 0.0 || *m < 1e-14 * c) {
                    *m = 0.0;
                    changed = true;
                }
            }
            let used: f64 = row.iter().zip(caps).filter(|(_, &c)| c > 0.0).map(|(m, c)| m / c).sum();
            if used > 1.0 + 1e-13 {
                for m in row.iter_mut() {
                    *m /= used;
                }
                changed = true;
            }
        }
        changed
    }

    /// Budget weights `w = u / cap` and the gradient with respect to them.
    fn weights_and_gradient(&self, u: &NodalControl, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nx = self.grid.n_x;
        let mut w = vec![0.0; u.u.len()];
        let mut g = vec![0.0; u.u.len()];
        for k in 0..self.slicing.len() {
            for i in 0..nx {
                let cap = self.caps[k][i];
                if cap > 0.0 {
                    w[k * nx + i] = u.u[k * nx + i] / cap;
                    g[k * nx + i] = scores[k * nx + i] * cap;
                }
            }
        }
        (w, g)
    }

    /// `P(w + step * g) - w`, expressed in node masses.
    fn projected_direction(&self, u: &NodalControl, w: &[f64], g: &[f64], step: f64) -> NodalControl {
        let nx = self.grid.n_x;
        let mut d = NodalControl::zero(self.slicing.clone(), nx);
        let mut buf = Vec::with_capacity(nx);
        for k in 0..self.slicing.len() {
            let caps = &self.caps[k];
            let allowed: Vec<usize> = (0..nx).filter(|&i| caps[i] > 0.0).collect();
            buf.clear();
            buf.extend(allowed.iter().map(|&i| w[k * nx + i] + step * g[k * nx + i]));
            project_capped_simplex(&mut buf);
            for (&i, &v) in allowed.iter().zip(&buf) {
                d.u[k * nx + i] = v * caps[i] - u.u[k * nx + i];
            }
        }
        d
    }

    /// Exact line search on `[0, 1]`; returns the step and the new state.
    fn line_search(&self, u: &NodalControl, state: &State, d: &NodalControl) -> Result<(f64, State)> {
        let q = u.to_masses(&self.grid);
        let qd = d.to_masses(&self.grid);
        let eval = |gamma: f64| -> Result<(State, f64, f64)> {
            let qg = StepMasses::combine(1.0, &q, gamma, &qd);
            let st = self.obj.state(&qg)?;
            let (d1, d2) = self.obj.derivatives(&qg, &st, &qd)?;
            Ok((st, d1, d2))
        };
        let (d0, dd0) = self.obj.derivatives(&q, state, &qd)?;
        if !(d0 > 0.0) {
            return Ok((0.0, state.clone()));
        }
        let j0 = state.payoff.j;
        let (s1, d1, _) = eval(1.0)?;
        if d1 >= 0.0 && s1.payoff.j >= j0 {
            return Ok((1.0, s1));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut gamma = if dd0 < 0.0 { (-d0 / dd0).clamp(0.0, 1.0) } else { 0.5 };
        if gamma <= lo || gamma >= hi {
            gamma = 0.5;
        }
        let mut best = (0.0, state.clone());
        for _ in 0..60 {
            let (st, g1, g2) = eval(gamma)?;
            if st.payoff.j >= best.1.payoff.j {
                best = (gamma, st);
            }
            if g1.abs() <= 1e-13 * (1.0 + d0.abs()) {
                break;
            }
            if g1 > 0.0 {
                lo = gamma;
            } else {
                hi = gamma;
            }
            if hi - lo < 1e-15 {
                break;
            }
            let newton = gamma - g1 / g2;
            gamma = if g2 < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        if s1.payoff.j > best.1.payoff.j {
            best = (1.0, s1);
        }
        Ok(best)
    }

    pub fn run(&self, start: NodalControl) -> Result<RunOutcome> {
        let mut u = start;
        self.clean(&mut u);
        let mut state = self.obj.state(&u.to_masses(&self.grid))?;
        let mut j_trace = vec![state.payoff.j];
        let mut gap_trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
        loop {
            let q = u.to_masses(&self.grid);
            let g = self.obj.gradient(&q, &state)?;
            let scores = self.scores(&g);
            let gap = self.gap(&scores, &u);
            gap_trace.push(gap);
            if gap < self.config.fw_gap_tol {
                converged = true;
                break;
            }
            if iterations >= self.config.max_iters {
                break;
            }
            iterations += 1;
            let (gamma, mut next_u, next_state) = match self.config.step_rule {
                StepRule::LineSearch => {
                    let d = self.pairwise_direction(&scores, &u);
                    let (gamma, st) = self.line_search(&u, &state, &d)?;
                    (gamma, NodalControl::combine(1.0, &u, gamma, &d), st)
                }
                StepRule::Harmonic => {
                    let s = self.best_response_vertex(&scores);
                    let gamma = 2.0 / (iterations as f64 + 2.0);
                    let next = NodalControl::combine(1.0 - gamma, &u, gamma, &s);
                    let st = self.obj.state(&next.to_masses(&self.grid))?;
                    (gamma, next, st)
                }
                StepRule::Projected => {
                    let (w, gw) = self.weights_and_gradient(&u, &scores);
                    let mut bb_step = f64::NAN;
                    if let Some((w0, g0)) = &previous {
                        // short Barzilai-Borwein step; the long one stalls on
                        // spread-out optima
                        let (mut sy, mut yy) = (0.0, 0.0);
                        for j in 0..w.len() {
                            let dg = gw[j] - g0[j];
                            sy += (w[j] - w0[j]) * dg;
                            yy += dg * dg;
                        }
                        bb_step = if sy < 0.0 { (-sy / yy).clamp(1e-12, 1e12) } else { f64::NAN };
                    }
                    if !bb_step.is_finite() {
                        let gmax = gw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        bb_step = 1.0 / gmax.max(1e-300);
                    }
                    let d = self.projected_direction(&u, &w, &gw, bb_step);
                    previous = Some((w, gw));
                    let (gamma, st) = self.line_search(&u, &state, &d)?;
                    (gamma, NodalControl::combine(1.0, &u, gamma, &d), st)
                }
            };
            if gamma == 0.0 {
                // no ascent along the chosen direction: stationary to roundoff
                break;
            }
            state = if self.clean(&mut next_u) { self.obj.state(&next_u.to_masses(&self.grid))? } else { next_state };
            u = next_u;
            j_trace.push(state.payoff.j);
        }
        Ok(RunOutcome { control: u, state, j_trace, gap_trace, iterations, converged })
    }

    pub(crate) fn random_start(&self, rng: &mut ChaCha8Rng, tv_cap: f64) -> NodalControl {
        let nx = self.grid.n_x;
        let mut u = NodalControl::zero(self.slicing.clone(), nx);
        for k in 0..self.slicing.len() {
            let allowed: Vec<usize> = (0..nx).filter(|&i| self.caps[k][i] > 0.0).collect();
            if allowed.is_empty() {
                continue;
            }
            let count = rng.gen_range(1..=3usize);
            let row = &mut u.u[k * nx..(k + 1) * nx];
            for &i in allowed.choose_multiple(rng, count) {
                row[i] += rng.gen_range(0.1..1.0);
            }
            let level = 1.0 - rng.gen::<f64>();
            let used: f64 = row.iter().zip(&self.caps[k]).filter(|(_, &c)| c > 0.0).map(|(m, c)| m / c).sum();
            // uniform TV level in (0, tv_cap], or uniform budget use without a cap
            let scale = if tv_cap.is_finite() { tv_cap * level / row.iter().sum::<f64>() } else { level / used };
            for m in row.iter_mut() {
                *m *= scale;
            }
            let used = used * scale;
            if used > 1.0 {
                for m in row.iter_mut() {
                    *m /= used;
                }
            }
        }
        u
    }
}

/// Euclidean projection onto `{w >= 0, sum w <= 1}`.
fn project_capped_simplex(v: &mut [f64]) {
    let positive: f64 = v.iter().map(|x| x.max(0.0)).sum();
    if positive <= 1.0 {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        return;
    }
    let mut sorted: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (j, &x) in sorted.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - tau).max(0.0));
}

pub(crate) struct RunOutcome {
    pub control: NodalControl,
    pub state: State,
    pub j_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CertificateStatus {
    /// No TV cap configured: the uniqueness regime is not claimed.
    NotRequested,
    Certified {
        report: CertificateReport,
    },
    NotCertified {
        report: CertificateReport,
    },
    Refused {
        reason: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub mu_opt: TimeMeasure,
    pub control: NodalControl,
    pub payoff: PayoffBreakdown,
    pub j_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    pub final_gap: f64,
    /// Largest directional derivative over the direction dictionary.
    pub euler_residual: f64,
    pub dictionary_size: usize,
    pub certificate: CertificateStatus,
    pub iterations: usize,
    pub converged: bool,
}

impl OptimizationReport {
    pub fn write_trace_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,J,gap")?;
        for (k, j) in self.j_trace.iter().enumerate() {
            let gap = self.gap_trace.get(k).copied().unwrap_or(f64::NAN);
            writeln!(out, "{k},{j:.15e},{gap:.6e}")?;
        }
        Ok(())
    }
}

pub fn gradient_density(
    params: &ModelParams,
    mu: &TimeMeasure,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<GradientDensity> {
    let obj = Objective::new(params, grid, options)?;
    let q = obj.masses(mu)?;
    let state = obj.state(&q)?;
    obj.gradient(&q, &state)
}

/// Linear maximizer of `mu -> <mu, G>` over the feasible controls on the
/// given slicing: one saturated atom per slice at the best node, or nothing
/// when no node has a positive value.
pub fn best_direction(
    g: &GradientDensity,
    params: &ModelParams,
    slicing: &Slicing,
    delta_cap: Option<f64>,
) -> TimeMeasure {
    let grid = *g.g.grid();
    let bps = slicing.breakpoints(&grid);
    let nx = grid.n_x;
    let dt = grid.dt();
    let mut u = NodalControl::zero(slicing.clone(), nx);
    for k in 0..slicing.len() {
        let caps = node_caps(params, &grid, bps[k], bps[k + 1], delta_cap);
        let mut score = vec![0.0; nx];
        for n in slicing.steps[k]..slicing.steps[k + 1] {
            for (s, v) in score.iter_mut().zip(g.g.trace(n + 1)) {
                *s += dt * v;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..nx {
            let forbidden = (slicing.steps[k]..=slicing.steps[k + 1]).any(|n| g.forbidden[n * nx + i]);
            if caps[i] <= 0.0 || forbidden {
                continue;
            }
            let v = score[i] * caps[i];
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            u.u[k * nx + i] = caps[i];
        }
    }
    u.to_measure(&grid)
}

pub fn optimize(params: &ModelParams, grid: &Grid, config: &OptimizerConfig) -> Result<OptimizationReport> {
    config.validate()?;
    let obj = Objective::new(params, grid, &config.solve)?;
    optimize_with(&obj, params, config, None)
}

/// Runs the optimizer on a prepared objective, optionally from a warm start.
pub(crate) fn optimize_with(
    obj: &Objective,
    params: &ModelParams,
    config: &OptimizerConfig,
    start: Option<NodalControl>,
) -> Result<OptimizationReport> {
    let problem = Problem::new(obj, params, config);
    let start = start.unwrap_or_else(|| NodalControl::zero(problem.slicing.clone(), problem.grid.n_x));
    let run = problem.run(start)?;
    finish(&problem, run)
}

fn finish(problem: &Problem, run: RunOutcome) -> Result<OptimizationReport> {
    let grid = problem.grid;
    let config = problem.config;
    let mu_opt = run.control.to_measure(&grid);
    let q = run.control.to_masses(&grid);
    let dict_spec = DictionarySpec { delta_cap: config.delta_cap, ..config.dictionary };
    let targets = direction_dictionary(problem.params, &mu_opt, &grid, &dict_spec)?;
    let residual = euler_residual_with(problem.obj, &q, &targets)?;
    let certificate = match config.delta_cap {
        None => CertificateStatus::NotRequested,
        Some(delta) => {
            let zero = TimeMeasure::zero(grid.r, grid.t);
            if mu_opt.total_variation_sup() == 0.0 {
                CertificateStatus::Refused { reason: "optimum is the zero control; no segment to certify".into() }
            } else {
                match concavity_certificate_with(problem.params, problem.obj, &mu_opt, &zero, delta, 5) {
                    Ok(report) if report.certified() => CertificateStatus::Certified { report },
                    Ok(report) => CertificateStatus::NotCertified { report },
                    Err(Error::Precondition(reason)) => CertificateStatus::Refused { reason },
                    Err(e) => return Err(e),
                }
            }
        }
    };
    Ok(OptimizationReport {
        mu_opt,
        payoff: run.state.payoff,
        final_gap: *run.gap_trace.last().unwrap_or(&f64::NAN),
        j_trace: run.j_trace,
        gap_trace: run.gap_trace,
        euler_residual: residual.value(),
        dictionary_size: targets.len(),
        certificate,
        iterations: run.iterations,
        converged: run.converged,
        control: run.control,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub competitors: Vec<OptimizationReport>,
    /// Largest probe distance between two competitor optima.
    pub max_pairwise_distance: f64,
    /// Largest probe distance from a competitor optimum to the reference one.
    pub max_distance_to_reference: f64,
    /// Concavity certificates along reference-to-competitor segments whose
    /// endpoints differ.
    pub segment_certificates: Vec<CertificateReport>,
    pub all_concave: bool,
}

/// Re-optimizes from random feasible starts inside the TV cap and compares
/// the optima.
pub fn local_uniqueness_probe(
    params: &ModelParams,
    report: &OptimizationReport,
    n_competitors: usize,
    grid: &Grid,
    config: &OptimizerConfig,
) -> Result<ProbeReport> {
    config.validate()?;
    let delta = config
        .delta_cap
        .ok_or_else(|| Error::Precondition("the uniqueness probe needs a TV cap (delta_cap)".into()))?;
    if !report.converged {
        return Err(Error::Precondition("the reference optimization did not converge".into()));
    }
    let h1 = h1_distance_to_equilibrium(params, grid)?;
    if h1 > delta {
        return Err(Error::Precondition(format!(
            "initial datum too far from equilibrium: |phi0 - h|_H1 = {h1} exceeds delta {delta}"
        )));
    }
    if report.mu_opt.total_variation_sup() > delta * (1.0 + 1e-12) {
        return Err(Error::Precondition("reference optimum lies outside the TV cap".into()));
    }
    let obj = Objective::new(params, grid, &config.solve)?;
    let problem = Problem::new(&obj, params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<NodalControl> = (0..n_competitors).map(|_| problem.random_start(&mut rng, delta)).collect();
    let competitors = starts.into_par_iter().map(|s| finish(&problem, problem.run(s)?)).collect::<Result<Vec<_>>>()?;
    let probes = standard_probes(grid);
    let mut max_pairwise: f64 = 0.0;
    for a in 0..competitors.len() {
        for b in a + 1..competitors.len() {
            max_pairwise =
                max_pairwise.max(weakstar_distance(&competitors[a].mu_opt, &competitors[b].mu_opt, &probes)?);
        }
    }
    let mut to_ref: f64 = 0.0;
    let mut certificates = Vec::new();
    for c in &competitors {
        to_ref = to_ref.max(weakstar_distance(&c.mu_opt, &report.mu_opt, &probes)?);
        let eps = TimeMeasure::combine(1.0, &c.mu_opt, -1.0, &report.mu_opt)?.total_variation_sup();
        if eps > 0.0 {
            certificates.push(concavity_certificate_with(params, &obj, &report.mu_opt, &c.mu_opt, delta, 5)?);
        }
    }
    let all_concave = certificates.iter().all(|c| c.all_negative);
    Ok(ProbeReport {
        competitors,
        max_pairwise_distance: max_pairwise,
        max_distance_to_reference: to_ref,
        segment_certificates: certificates,
        all_concave,
    })
}
