//! Harvesting payoff `J(mu) = <mu, phi> - Psi(<mu, c>)`, its first and second
//! derivatives along measure directions, the Euler residual over a direction
//! dictionary and the concavity certificate along segments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::measures::{SpatialMeasure, StepMasses, TimeMeasure};
use crate::model::{ForbiddenMask, ModelParams, Psi};
use crate::solver::{Dynamics, SolveOptions};

/// Version of the direction family built by [`direction_dictionary`].
pub const DICTIONARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffBreakdown {
    pub harvest_term: f64,
    pub cost_inner: f64,
    pub cost_term: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

/// Forward state of one control: the density and the payoff pieces.
#[derive(Clone, Debug)]
pub struct State {
    pub phi: Field,
    pub payoff: PayoffBreakdown,
}

/// Gradient density `G = phi (1 - p) - Psi'(<mu, c>) c`; nodes flagged in
/// `forbidden` must never receive mass and their value is meaningless.
#[derive(Clone, Debug)]
pub struct GradientDensity {
    pub g: Field,
    pub forbidden: Vec<bool>,
}

impl GradientDensity {
    /// `sum_n q^n . G^{n+1}`, the derivative of `J` along `q`.
    pub fn pair(&self, q: &StepMasses) -> f64 {
        q.pair(&self.g)
    }
}

/// Payoff of one player with everything sampled on a grid. An optional
/// background measure (the other players) enters the dynamics but not the
/// payoff.
#[derive(Clone, Debug)]
pub struct Objective {
    dynamics: Dynamics,
    cost: Field,
    psi: Psi,
    mask: Option<ForbiddenMask>,
    forbidden: Vec<bool>,
    background: Option<StepMasses>,
}

impl Objective {
    pub fn new(params: &ModelParams, grid: &Grid, options: &SolveOptions) -> Result<Self> {
        let dynamics = Dynamics::new(params, grid, options)?;
        let cost = Field::from_values(*grid, params.cost.sample(grid))?;
        let forbidden =
            params.forbidden_mask.as_ref().map_or_else(|| vec![false; (grid.n_t + 1) * grid.n_x], |m| m.sample(grid));
        Ok(Objective {
            dynamics,
            cost,
            psi: params.psi.clone(),
            mask: params.forbidden_mask.clone(),
            forbidden,
            background: None,
        })
    }

    pub fn with_background(mut self, background: Option<StepMasses>) -> Self {
        self.background = background.filter(|b| !b.is_zero());
        self
    }

    pub fn grid(&self) -> &Grid {
        self.dynamics.grid()
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &Field {
        &self.cost
    }

    pub fn psi(&self) -> &Psi {
        &self.psi
    }

    pub fn forbidden(&self) -> &[bool] {
        &self.forbidden
    }

    fn driving(&self, q: &StepMasses) -> StepMasses {
        match &self.background {
            Some(b) => StepMasses::combine(1.0, q, 1.0, b),
            None => q.clone(),
        }
    }

    /// Rejects mass inside the forbidden region.
    pub fn check_forbidden(&self, mu: &TimeMeasure) -> Result<()> {
        let Some(mask) = &self.mask else { return Ok(()) };
        let g = self.grid();
        let bps = mu.breakpoints();
        for (k, slice) in mu.slices().iter().enumerate() {
            let mut times = vec![bps[k], bps[k + 1]];
            times.extend((0..=g.n_t).map(|n| g.time(n)).filter(|&t| t > bps[k] && t < bps[k + 1]));
            let hit = |x: f64| times.iter().any(|&t| mask.is_forbidden(t, x, g.r, g.t));
            if let Some(a) = slice.atoms.iter().find(|a| a.mass != 0.0 && hit(a.x)) {
                return Err(Error::Infeasible(format!("atom at x={} lies in the forbidden region (slice {k})", a.x)));
            }
            if let Some(d) = &slice.density {
                let n = d.len();
                for (j, v) in d.iter().enumerate() {
                    let x = g.r * j as f64 / (n - 1) as f64;
                    if *v != 0.0 && hit(x) {
                        return Err(Error::Infeasible(format!("density is nonzero at forbidden x={x} (slice {k})")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Step masses of an admissible control.
    pub fn masses(&self, mu: &TimeMeasure) -> Result<StepMasses> {
        if !mu.is_nonnegative() {
            return Err(Error::Infeasible("controls must be nonnegative".into()));
        }
        self.check_forbidden(mu)?;
        mu.discretize(self.grid())
    }

    pub fn state(&self, q: &StepMasses) -> Result<State> {
        let phi = self.dynamics.forward(&self.driving(q))?;
        let payoff = self.payoff_of(q, &phi);
        Ok(State { phi, payoff })
    }

    fn payoff_of(&self, q: &StepMasses, phi: &Field) -> PayoffBreakdown {
        let harvest_term = q.pair(phi);
        let cost_inner = q.pair(&self.cost);
        let cost_term = self.psi.value(cost_inner);
        PayoffBreakdown { harvest_term, cost_inner, cost_term, j: harvest_term - cost_term }
    }

    pub fn tangent(&self, q: &StepMasses, state: &State, q_nu: &StepMasses) -> Result<Field> {
        self.dynamics.tangent(&self.driving(q), &state.phi, q_nu)
    }

    /// `dJ[nu] = <mu, phi1> + <nu, phi> - Psi'(<mu, c>) <nu, c>`.
    pub fn directional(&self, q: &StepMasses, state: &State, q_nu: &StepMasses) -> Result<f64> {
        let phi1 = self.tangent(q, state, q_nu)?;
        Ok(q.pair(&phi1) + q_nu.pair(&state.phi) - self.psi.d1(state.payoff.cost_inner) * q_nu.pair(&self.cost))
    }

    /// First and second derivative of `zeta -> J(mu + zeta nu)` at zero.
    pub fn derivatives(&self, q: &StepMasses, state: &State, q_nu: &StepMasses) -> Result<(f64, f64)> {
        let driving = self.driving(q);
        let phi1 = self.dynamics.tangent(&driving, &state.phi, q_nu)?;
        let phi2 = self.dynamics.second(&driving, &state.phi, q_nu, &phi1)?;
        let c_nu = q_nu.pair(&self.cost);
        let s = state.payoff.cost_inner;
        let d1 = q.pair(&phi1) + q_nu.pair(&state.phi) - self.psi.d1(s) * c_nu;
        let d2 = q.pair(&phi2) + 2.0 * q_nu.pair(&phi1) - self.psi.d2(s) * c_nu * c_nu;
        Ok((d1, d2))
    }

    /// `2 <nu, phi1> + <mu, phi2>`, the state part of the second derivative.
    pub fn state_curvature(&self, q: &StepMasses, state: &State, q_nu: &StepMasses) -> Result<f64> {
        let driving = self.driving(q);
        let phi1 = self.dynamics.tangent(&driving, &state.phi, q_nu)?;
        let phi2 = self.dynamics.second(&driving, &state.phi, q_nu, &phi1)?;
        Ok(q.pair(&phi2) + 2.0 * q_nu.pair(&phi1))
    }

    pub fn gradient(&self, q: &StepMasses, state: &State) -> Result<GradientDensity> {
        let p = self.dynamics.adjoint(&self.driving(q), &state.phi, q)?;
        let slope = self.psi.d1(state.payoff.cost_inner);
        let values = state
            .phi
            .values()
            .iter()
            .zip(p.values())
            .zip(self.cost.values())
            .map(|((phi, p), c)| phi * (1.0 - p) - slope * c)
            .collect();
        Ok(GradientDensity { g: Field::from_values(*self.grid(), values)?, forbidden: self.forbidden.clone() })
    }
}

pub fn evaluate_j(
    params: &ModelParams,
    mu: &TimeMeasure,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<PayoffBreakdown> {
    let obj = Objective::new(params, grid, options)?;
    let q = obj.masses(mu)?;
    Ok(obj.state(&q)?.payoff)
}

pub fn directional_derivative(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    nu: &TimeMeasure,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<f64> {
    let obj = Objective::new(params, grid, options)?;
    let q = obj.masses(mu_star)?;
    let state = obj.state(&q)?;
    obj.directional(&q, &state, &nu.discretize(grid)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EulerResidual {
    /// Largest directional derivative; `None` for an empty dictionary
    /// (the vacuous maximum is minus infinity).
    pub max: Option<f64>,
    /// Index of the direction attaining the maximum.
    pub worst: Option<usize>,
    pub values: Vec<f64>,
}

impl EulerResidual {
    pub fn value(&self) -> f64 {
        self.max.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Largest `dJ[s - mu*]` over admissible targets `s`. At a maximizer every
/// value is `<= 0`; a positive value exhibits an improving direction.
pub fn euler_residual(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    targets: &[TimeMeasure],
    grid: &Grid,
    options: &SolveOptions,
) -> Result<EulerResidual> {
    let obj = Objective::new(params, grid, options)?;
    euler_residual_with(&obj, &obj.masses(mu_star)?, targets)
}

pub(crate) fn euler_residual_with(obj: &Objective, q: &StepMasses, targets: &[TimeMeasure]) -> Result<EulerResidual> {
    let state = obj.state(q)?;
    let values = targets
        .par_iter()
        .map(|s| {
            let q_nu = StepMasses::combine(1.0, &obj.masses(s)?, -1.0, q);
            obj.directional(q, &state, &q_nu)
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
    Ok(EulerResidual { max: worst.map(|i| values[i]), worst, values })
}

/// Largest atom mass a slice may place at each node: the budget cap
/// `1 / max_t b(t, x_i)` over the slice, further limited by the TV cap.
/// Forbidden nodes get zero.
pub fn node_caps(params: &ModelParams, grid: &Grid, lo: f64, hi: f64, delta_cap: Option<f64>) -> Vec<f64> {
    let mut times = vec![lo, hi];
    times.extend((0..=grid.n_t).map(|n| grid.time(n)).filter(|&t| t > lo && t < hi));
    times.extend(params.budget.time_nodes(params.t).into_iter().filter(|&t| t > lo && t < hi));
    (0..grid.n_x)
        .map(|i| {
            let x = grid.x(i);
            let blocked = params
                .forbidden_mask
                .as_ref()
                .is_some_and(|m| times.iter().any(|&t| m.is_forbidden(t, x, grid.r, grid.t)));
            if blocked {
                return 0.0;
            }
            let b = times.iter().map(|&t| params.budget.eval(t, x, grid.r, grid.t)).fold(0.0f64, f64::max);
            let cap = 1.0 / b;
            delta_cap.map_or(cap, |d| cap.min(d))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub size: usize,
    pub seed: u64,
    pub delta_cap: Option<f64>,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec { size: 64, seed: 0x5eed, delta_cap: None }
    }
}

/// Admissible targets `s` for the Euler residual (version
/// [`DICTIONARY_VERSION`]). Each target equals `mu*` except on one of its
/// slices, which is replaced by one of: a saturated atom at a random allowed
/// node (3/4 of the entries), the empty slice (1/8), or a saturated uniform
/// density on the allowed nodes (1/8).
pub fn direction_dictionary(
    params: &ModelParams,
    mu_star: &TimeMeasure,
    grid: &Grid,
    spec: &DictionarySpec,
) -> Result<Vec<TimeMeasure>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bps = mu_star.breakpoints().to_vec();
    let k_slices = mu_star.slices().len();
    let caps: Vec<Vec<f64>> =
        (0..k_slices).map(|k| node_caps(params, grid, bps[k], bps[k + 1], spec.delta_cap)).collect();
    let n_zero = spec.size / 8;
    let n_density = spec.size / 8;
    let n_atoms = spec.size - n_zero - n_density;
    let mut out = Vec::with_capacity(spec.size);
    let replace = |k: usize, slice: SpatialMeasure| -> Result<TimeMeasure> {
        let mut slices = mu_star.slices().to_vec();
        slices[k] = slice;
        TimeMeasure::new(mu_star.r(), bps.clone(), slices)
    };
    for _ in 0..n_atoms {
        let k = rng.gen_range(0..k_slices);
        let allowed: Vec<usize> = (0..grid.n_x).filter(|&i| caps[k][i] > 0.0).collect();
        let slice = match allowed.choose(&mut rng) {
            Some(&i) => SpatialMeasure::atom(grid.x(i), caps[k][i]),
            None => SpatialMeasure::zero(),
        };
        out.push(replace(k, slice)?);
    }
    for _ in 0..n_zero {
        let k = rng.gen_range(0..k_slices);
        out.push(replace(k, SpatialMeasure::zero())?);
    }
    for _ in 0..n_density {
        let k = rng.gen_range(0..k_slices);
        let shape: Vec<f64> = caps[k].iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
        let probe = replace(k, SpatialMeasure::density(shape.clone()))?;
        let budget = probe.budget_value(&params.budget, k)?;
        let tv = probe.slice_tv(k);
        let mut scale = if budget > 0.0 { 1.0 / budget } else { 0.0 };
        if let Some(d) = spec.delta_cap {
            if tv > 0.0 {
                scale = scale.min(d / tv);
            }
        }
        out.push(replace(k, SpatialMeasure::density(shape.iter().map(|v| v * scale).collect()))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JScan {
    /// `sup_t |mu_bar_t - mu_tilde_t|_TV`
    pub epsilon: f64,
    pub zeta: Vec<f64>,
    pub j: Vec<f64>,
    /// Derivative of `j` from the first variation.
    pub jp: Vec<f64>,
    /// Second derivative of `j` from the first and second variations.
    pub jpp: Vec<f64>,
    /// Second central difference of the `j` samples (interior points only).
    pub jpp_fd: Vec<Option<f64>>,
}

impl JScan {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "zeta,j,jpp")?;
        for ((z, j), jpp) in self.zeta.iter().zip(&self.j).zip(&self.jpp) {
            writeln!(out, "{z:.12e},{j:.12e},{jpp:.12e}")?;
        }
        Ok(())
    }
}

fn segment(obj: &Objective, mu_tilde: &TimeMeasure, mu_bar: &TimeMeasure) -> Result<(f64, StepMasses, StepMasses)> {
    let q0 = obj.masses(mu_tilde)?;
    obj.check_forbidden(mu_bar)?;
    if !mu_bar.is_nonnegative() {
        return Err(Error::Infeasible("controls must be nonnegative".into()));
    }
    let eps = TimeMeasure::combine(1.0, mu_bar, -1.0, mu_tilde)?.total_variation_sup();
    if !(eps > 0.0) {
        return Err(Error::Precondition("the two controls coincide (zero distance), no segment to scan".into()));
    }
    let q_nu = StepMasses::combine(1.0 / eps, &mu_bar.discretize(obj.grid())?, -1.0 / eps, &q0);
    Ok((eps, q0, q_nu))
}

/// Samples `j(zeta) = J(mu_tilde + zeta nu)` with `nu = (mu_bar - mu_tilde) / eps`
/// on `n_points` evenly spaced points of `[0, eps]`.
pub fn j_scan(
    params: &ModelParams,
    mu_tilde: &TimeMeasure,
    mu_bar: &TimeMeasure,
    n_points: usize,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<JScan> {
    let obj = Objective::new(params, grid, options)?;
    j_scan_with(&obj, mu_tilde, mu_bar, n_points)
}

pub(crate) fn j_scan_with(
    obj: &Objective,
    mu_tilde: &TimeMeasure,
    mu_bar: &TimeMeasure,
    n_points: usize,
) -> Result<JScan> {
    if n_points < 2 {
        return Err(Error::invalid("a scan needs at least two points"));
    }
    let (eps, q0, q_nu) = segment(obj, mu_tilde, mu_bar)?;
    let zeta: Vec<f64> = (0..n_points).map(|k| eps * k as f64 / (n_points - 1) as f64).collect();
    let samples = zeta
        .par_iter()
        .map(|&z| {
            let q = StepMasses::combine(1.0, &q0, z, &q_nu);
            let state = obj.state(&q)?;
            let (d1, d2) = obj.derivatives(&q, &state, &q_nu)?;
            Ok((state.payoff.j, d1, d2))
        })
        .collect::<Result<Vec<_>>>()?;
    let j: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let h = eps / (n_points - 1) as f64;
    let jpp_fd = (0..n_points)
        .map(|k| (k > 0 && k + 1 < n_points).then(|| (j[k + 1] - 2.0 * j[k] + j[k - 1]) / (h * h)))
        .collect();
    Ok(JScan {
        epsilon: eps,
        zeta,
        jp: samples.iter().map(|s| s.1).collect(),
        jpp: samples.iter().map(|s| s.2).collect(),
        j,
        jpp_fd,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    pub delta_probe: f64,
    /// `|phi0 - h|_{H^1}` with the discrete gradient.
    pub h1_distance: f64,
    pub tv_tilde: f64,
    pub tv_bar: f64,
    pub zeta: Vec<f64>,
    /// `2 <nu, phi1> + <mu*, phi2>` at every sampled `zeta`.
    pub key_values: Vec<f64>,
    pub all_negative: bool,
    /// `max |phi* - h|` over the samples.
    pub phi_minus_h_sup: f64,
    /// `min phi* / h` over the samples; the regime expects at least 1/2.
    pub min_phi_over_h: f64,
    /// `max_t |d_x phi*(t)|_{L^2}` over the samples.
    pub grad_sup: f64,
}

impl CertificateReport {
    pub fn certified(&self) -> bool {
        self.all_negative && self.min_phi_over_h >= 0.5
    }
}

/// `|phi0 - h|_{H^1}` on the grid, for constant `h`.
pub fn h1_distance_to_equilibrium(params: &ModelParams, grid: &Grid) -> Result<f64> {
    if !params.h.is_constant() {
        return Err(Error::Precondition("the carrying capacity must be constant in space and time".into()));
    }
    let h = params.h.max();
    let v: Vec<f64> = (0..grid.n_x).map(|i| params.phi0_at(grid.x(i)) - h).collect();
    let w = grid.weights();
    let l2: f64 = v.iter().zip(&w).map(|(a, w)| w * a * a).sum();
    let grad: f64 = v.windows(2).map(|p| (p[1] - p[0]).powi(2) / grid.dx()).sum();
    Ok((l2 + grad).sqrt())
}

pub fn concavity_certificate(
    params: &ModelParams,
    mu_tilde: &TimeMeasure,
    mu_bar: &TimeMeasure,
    delta_probe: f64,
    n_points: usize,
    grid: &Grid,
    options: &SolveOptions,
) -> Result<CertificateReport> {
    let obj = Objective::new(params, grid, options)?;
    concavity_certificate_with(params, &obj, mu_tilde, mu_bar, delta_probe, n_points)
}

pub(crate) fn concavity_certificate_with(
    params: &ModelParams,
    obj: &Objective,
    mu_tilde: &TimeMeasure,
    mu_bar: &TimeMeasure,
    delta_probe: f64,
    n_points: usize,
) -> Result<CertificateReport> {
    let grid = *obj.grid();
    let h1 = h1_distance_to_equilibrium(params, &grid)?;
    let (tv_tilde, tv_bar) = (mu_tilde.total_variation_sup(), mu_bar.total_variation_sup());
    let limit = delta_probe * (1.0 + 1e-12);
    if tv_tilde > limit || tv_bar > limit {
        return Err(Error::Precondition(format!(
            "controls must stay in the small-effort set: sup-TV {} and {} vs delta {delta_probe}",
            tv_tilde, tv_bar
        )));
    }
    if h1 > delta_probe {
        return Err(Error::Precondition(format!(
            "initial datum too far from equilibrium: |phi0 - h|_H1 = {h1} exceeds delta {delta_probe}"
        )));
    }
    let h = params.h.max();
    let (eps, q0, q_nu) = segment(obj, mu_tilde, mu_bar)?;
    let n = n_points.max(2);
    let zeta: Vec<f64> = (0..n).map(|k| eps * k as f64 / (n - 1) as f64).collect();
    let rows = zeta
        .par_iter()
        .map(|&z| {
            let q = StepMasses::combine(1.0, &q0, z, &q_nu);
            let state = obj.state(&q)?;
            let key = obj.state_curvature(&q, &state, &q_nu)?;
            let dev = state.phi.values().iter().fold(0.0f64, |m, v| m.max((v - h).abs()));
            let min = state.phi.min() / h;
            let grad = (0..=grid.n_t).map(|k| state.phi.grad_l2_at(k)).fold(0.0, f64::max);
            Ok((key, dev, min, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let key_values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(CertificateReport {
        delta_probe,
        h1_distance: h1,
        tv_tilde,
        tv_bar,
        all_negative: key_values.iter().all(|&v| v < 0.0),
        zeta,
        key_values,
        phi_minus_h_sup: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        min_phi_over_h: rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min),
        grad_sup: rows.iter().map(|r| r.3).fold(0.0, f64::max),
    })
}
