//! Nash equilibria of the multi-player harvesting game by damped
//! Gauss-Seidel best responses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measures::{standard_probes, weakstar_distance_masses, StepMasses, TimeMeasure};
use crate::model::{FieldSpec, ForbiddenMask, ModelParams, Psi};
use crate::optimizer::{optimize_with, NodalControl, OptimizationReport, OptimizerConfig, Problem};
use crate::payoff::{
    direction_dictionary, euler_residual_with, h1_distance_to_equilibrium, DictionarySpec, Objective, PayoffBreakdown,
};

/// Player-specific cost data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerSpec {
    pub psi: Psi,
    pub cost: FieldSpec,
    pub budget: FieldSpec,
    pub b0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forbidden_mask: Option<ForbiddenMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    /// Shared dynamics; its own cost fields are replaced per player.
    pub dynamics: ModelParams,
    pub players: Vec<PlayerSpec>,
    pub delta_cap: Option<f64>,
}

impl GameSpec {
    pub fn m(&self) -> usize {
        self.players.len()
    }

    /// Model seen by player `i`.
    pub fn player_params(&self, i: usize) -> ModelParams {
        let p = &self.players[i];
        ModelParams {
            psi: p.psi.clone(),
            cost: p.cost.clone(),
            budget: p.budget.clone(),
            b0: p.b0,
            forbidden_mask: p.forbidden_mask.clone(),
            ..self.dynamics.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.players.is_empty() {
            return Err(Error::invalid("a game needs at least one player"));
        }
        if let Some(d) = self.delta_cap {
            if !(d > 0.0) {
                return Err(Error::invalid("delta_cap must be positive"));
            }
        }
        for i in 0..self.m() {
            self.player_params(i).check_well_formed().map_err(|e| Error::Invalid(format!("player {i}: {e}")))?;
            let psi = &self.players[i].psi;
            if psi.d2(0.0) < 0.0 || psi.d1(0.0) < 0.0 {
                return Err(Error::Invalid(format!("player {i}: Psi must be convex and nondecreasing")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub optimizer: OptimizerConfig,
    /// Weight of the new best response in the damped update.
    pub damping: f64,
    pub max_rounds: usize,
    /// Displacement tolerance in the probe distance.
    pub tol: f64,
    /// Tolerance for Euler residuals and unilateral deviation gains.
    pub residual_tol: f64,
    pub deviations: usize,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            optimizer: OptimizerConfig::default(),
            damping: 0.5,
            max_rounds: 100,
            tol: 1e-7,
            residual_tol: 1e-5,
            deviations: 32,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashReport {
    pub profile: Vec<TimeMeasure>,
    pub controls: Vec<NodalControl>,
    pub payoffs: Vec<PayoffBreakdown>,
    pub euler_residuals: Vec<f64>,
    /// Largest payoff gain over the random unilateral deviations, per player.
    pub deviation_gains: Vec<f64>,
    /// Per round, per player displacement.
    pub displacements: Vec<Vec<f64>>,
    pub rounds: usize,
    pub converged: bool,
}

impl NashReport {
    pub fn write_displacements_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let m = self.profile.len();
        let head: Vec<String> = (0..m).map(|i| format!("player{i}")).collect();
        writeln!(out, "round,{}", head.join(","))?;
        for (r, row) in self.displacements.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|d| format!("{d:.6e}")).collect();
            writeln!(out, "{r},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn background(controls: &[NodalControl], skip: usize, grid: &Grid) -> Option<StepMasses> {
    let mut eta: Option<StepMasses> = None;
    for (j, c) in controls.iter().enumerate() {
        if j == skip {
            continue;
        }
        let q = c.to_masses(grid);
        match eta.as_mut() {
            Some(e) => e.add_scaled(1.0, &q),
            None => eta = Some(q),
        }
    }
    eta
}

fn player_config(spec: &GameSpec, config: &GameConfig) -> OptimizerConfig {
    OptimizerConfig { delta_cap: spec.delta_cap, ..config.optimizer.clone() }
}

fn player_objective(
    spec: &GameSpec,
    i: usize,
    eta: Option<StepMasses>,
    grid: &Grid,
    config: &GameConfig,
) -> Result<(ModelParams, Objective)> {
    let params = spec.player_params(i);
    let obj = Objective::new(&params, grid, &config.optimizer.solve)?.with_background(eta);
    Ok((params, obj))
}

/// Best response of player `i` to the others' controls, frozen in the
/// dynamics.
pub fn best_response(
    spec: &GameSpec,
    i: usize,
    others: &[TimeMeasure],
    grid: &Grid,
    config: &GameConfig,
) -> Result<OptimizationReport> {
    spec.check()?;
    if others.len() + 1 != spec.m() {
        return Err(Error::Invalid(format!("expected {} opponent measures, got {}", spec.m() - 1, others.len())));
    }
    let mut eta: Option<StepMasses> = None;
    for mu in others {
        if !mu.is_nonnegative() {
            return Err(Error::Infeasible("opponent measure has negative mass".into()));
        }
        let q = mu.discretize(grid)?;
        match eta.as_mut() {
            Some(e) => e.add_scaled(1.0, &q),
            None => eta = Some(q),
        }
    }
    let (params, obj) = player_objective(spec, i, eta, grid, config)?;
    optimize_with(&obj, &params, &player_config(spec, config), None)
}

pub fn nash_solve(spec: &GameSpec, grid: &Grid, config: &GameConfig) -> Result<NashReport> {
    spec.check()?;
    config.optimizer.validate()?;
    if !(config.damping > 0.0 && config.damping <= 1.0) {
        return Err(Error::invalid("damping must lie in (0, 1]"));
    }
    if let Some(delta) = spec.delta_cap {
        let h1 = h1_distance_to_equilibrium(&spec.dynamics, grid)?;
        if h1 > delta {
            return Err(Error::Precondition(format!(
                "initial datum too far from equilibrium: |phi0 - h|_H1 = {h1} exceeds delta {delta}"
            )));
        }
    }
    let m = spec.m();
    let opt_config = player_config(spec, config);
    let probes = standard_probes(grid);
    let mut controls: Vec<NodalControl> = Vec::with_capacity(m);
    let mut displacements = Vec::new();
    let mut rounds = 0;
    let mut settled = false;
    while rounds < config.max_rounds {
        let mut row = vec![0.0; m];
        for i in 0..m {
            let eta = background(&controls, i, grid);
            let (params, obj) = player_objective(spec, i, eta, grid, config)?;
            let warm = controls.get(i).cloned();
            let br = optimize_with(&obj, &params, &opt_config, warm)?.control;
            if i < controls.len() {
                let old = controls[i].clone();
                let next = NodalControl::combine(1.0 - config.damping, &old, config.damping, &br);
                row[i] = weakstar_distance_masses(&old.to_masses(grid), &next.to_masses(grid), &probes);
                controls[i] = next;
            } else {
                // the first sweep is undamped
                row[i] = weakstar_distance_masses(&StepMasses::zeros(*grid), &br.to_masses(grid), &probes);
                controls.push(br);
            }
        }
        rounds += 1;
        let worst = row.iter().fold(0.0f64, |a, &b| a.max(b));
        displacements.push(row);
        if rounds > 1 && worst <= config.tol {
            settled = true;
            break;
        }
    }

    let mut profile = Vec::with_capacity(m);
    let mut payoffs = Vec::with_capacity(m);
    let mut euler_residuals = Vec::with_capacity(m);
    let mut deviation_gains = Vec::with_capacity(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in 0..m {
        let eta = background(&controls, i, grid);
        let (params, obj) = player_objective(spec, i, eta, grid, config)?;
        let mu = controls[i].to_measure(grid);
        let q = controls[i].to_masses(grid);
        let state = obj.state(&q)?;
        let dict = DictionarySpec { delta_cap: spec.delta_cap, ..config.optimizer.dictionary };
        let targets = direction_dictionary(&params, &mu, grid, &dict)?;
        euler_residuals.push(euler_residual_with(&obj, &q, &targets)?.value());
        let problem = Problem::new(&obj, &params, &opt_config);
        let cap = spec.delta_cap.unwrap_or(f64::INFINITY);
        let mut gain = f64::NEG_INFINITY;
        for _ in 0..config.deviations {
            let dev = problem.random_start(&mut rng, cap);
            let j = obj.state(&dev.to_masses(grid))?.payoff.j;
            gain = gain.max(j - state.payoff.j);
        }
        deviation_gains.push(gain);
        payoffs.push(state.payoff);
        profile.push(mu);
    }
    let converged = settled
        && euler_residuals.iter().all(|&r| r <= config.residual_tol)
        && deviation_gains.iter().all(|&g| g <= config.residual_tol);
    Ok(NashReport { profile, controls, payoffs, euler_residuals, deviation_gains, displacements, rounds, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn player(cost: f64, budget: f64) -> PlayerSpec {
        PlayerSpec { psi: Psi::identity(), cost: cost.into(), budget: budget.into(), b0: budget, forbidden_mask: None }
    }

    fn spec(players: Vec<PlayerSpec>) -> GameSpec {
        GameSpec { dynamics: ModelParams::uniform(1.0, 1.0, 1.0, 0.0, 1.0), players, delta_cap: None }
    }

    fn small_config() -> GameConfig {
        GameConfig {
            optimizer: OptimizerConfig { slices: 4, ..Default::default() },
            deviations: 4,
            ..Default::default()
        }
    }

    #[test]
    fn single_player_matches_optimizer() {
        let g = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let s = spec(vec![player(0.3, 2.0)]);
        let cfg = small_config();
        let rep = nash_solve(&s, &g, &cfg).unwrap();
        let direct = crate::optimizer::optimize(&s.player_params(0), &g, &cfg.optimizer).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.controls[0].u, direct.control.u);
        assert_eq!(rep.payoffs[0].j, direct.payoff.j);
    }

    #[test]
    fn unprofitable_players_stay_home() {
        let g = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let s = spec(vec![player(2.0, 1.0), player(2.0, 1.0)]);
        let rep = nash_solve(&s, &g, &small_config()).unwrap();
        assert!(rep.converged);
        for mu in &rep.profile {
            assert_eq!(mu.total_variation_sup(), 0.0);
        }
    }

    #[test]
    fn heavy_opponents_leave_nothing() {
        let g = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let s = spec(vec![player(0.5, 1.0), player(0.5, 1.0)]);
        let heavy =
            TimeMeasure::constant_in_time(1.0, 1.0, crate::measures::SpatialMeasure::density(vec![400.0; 21])).unwrap();
        let br = best_response(&s, 0, &[heavy], &g, &small_config()).unwrap();
        assert!(br.payoff.j.abs() < 1e-6);
        assert!(br.mu_opt.total_variation_sup() < 1e-6);
    }

    #[test]
    fn rejects_concave_psi() {
        let mut s = spec(vec![player(0.3, 1.0)]);
        s.players[0].psi = Psi::quadratic(0.0, 1.0, -1.0);
        assert!(matches!(s.check(), Err(Error::Invalid(_))));
    }
}
