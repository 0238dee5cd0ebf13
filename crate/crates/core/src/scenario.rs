//! Scenario and measure files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameSpec, PlayerSpec};
use crate::measures::TimeMeasure;
use crate::model::{FieldSpec, ForbiddenMask, ModelParams, Psi};

/// Shipped scenarios, by name.
const BUILTIN: &[(&str, &str)] = &[
    ("hub", include_str!("../../../scenarios/hub.json")),
    ("park", include_str!("../../../scenarios/park.json")),
    ("quadratic", include_str!("../../../scenarios/quadratic.json")),
    ("seasonal", include_str!("../../../scenarios/seasonal.json")),
    ("small-delta", include_str!("../../../scenarios/small-delta.json")),
    ("free-fish", include_str!("../../../scenarios/free-fish.json")),
    ("no-profit", include_str!("../../../scenarios/no-profit.json")),
    ("logistic", include_str!("../../../scenarios/logistic.json")),
    ("duopoly", include_str!("../../../scenarios/duopoly.json")),
];

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(rename = "R", default = "one")]
    r: f64,
    #[serde(rename = "T", default = "one")]
    t: f64,
    alpha: FieldSpec,
    h: FieldSpec,
    #[serde(default = "Psi::identity")]
    psi: Psi,
    #[serde(default)]
    cost: Option<FieldSpec>,
    #[serde(default)]
    budget: Option<FieldSpec>,
    #[serde(default)]
    b0: Option<f64>,
    #[serde(default)]
    phi0: Option<FieldSpec>,
    #[serde(default)]
    forbidden_mask: Option<ForbiddenMask>,
    #[serde(default)]
    require_constant_h: bool,
    #[serde(default)]
    grid: Option<[usize; 2]>,
    #[serde(default)]
    control: Option<TimeMeasure>,
    #[serde(default)]
    players: Option<Vec<PlayerSpec>>,
    #[serde(default)]
    delta_cap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: Option<String>,
    pub description: Option<String>,
    pub params: ModelParams,
    /// Suggested `(n_x, n_t)`.
    pub grid: Option<(usize, usize)>,
    /// Fixed control for forward solves.
    pub control: Option<TimeMeasure>,
    pub players: Option<Vec<PlayerSpec>>,
    pub delta_cap: Option<f64>,
}

fn missing(path: &str) -> Error {
    Error::Parse { path: path.into(), message: "missing field (required unless players are given)".into() }
}

pub(crate) fn from_json_with_path<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse { path, message: inner.to_string() }
    })
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: ScenarioFile = from_json_with_path(text)?;
        let lead = f.players.as_ref().and_then(|p| p.first()).cloned();
        let cost = f.cost.or_else(|| lead.as_ref().map(|p| p.cost.clone())).ok_or_else(|| missing("cost"))?;
        let budget = f.budget.or_else(|| lead.as_ref().map(|p| p.budget.clone())).ok_or_else(|| missing("budget"))?;
        let b0 = f.b0.unwrap_or_else(|| budget.min());
        let params = ModelParams {
            r: f.r,
            t: f.t,
            phi0: f.phi0.unwrap_or_else(|| f.h.clone()),
            alpha: f.alpha,
            h: f.h,
            psi: f.psi,
            cost,
            budget,
            b0,
            forbidden_mask: f.forbidden_mask,
            require_constant_h: f.require_constant_h,
        };
        params.check_well_formed()?;
        if let Some(d) = f.delta_cap {
            if !(d > 0.0) {
                return Err(Error::Parse { path: "delta_cap".into(), message: "must be positive".into() });
            }
        }
        if let Some([nx, nt]) = f.grid {
            if nx < 3 || nt < 1 {
                return Err(Error::Parse { path: "grid".into(), message: "need n_x >= 3 and n_t >= 1".into() });
            }
        }
        if let Some(mu) = &f.control {
            if (mu.r() - params.r).abs() > 1e-12 || (mu.horizon() - params.t).abs() > 1e-12 {
                return Err(Error::Parse {
                    path: "control".into(),
                    message: "control lives on a different box".into(),
                });
            }
        }
        if let Some(players) = &f.players {
            if players.is_empty() {
                return Err(Error::Parse { path: "players".into(), message: "at least one player required".into() });
            }
        }
        Ok(Scenario {
            name: f.name,
            description: f.description,
            params,
            grid: f.grid.map(|[a, b]| (a, b)),
            control: f.control,
            players: f.players,
            delta_cap: f.delta_cap,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn builtin(name: &str) -> Option<Scenario> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Scenario::from_json(text).expect("shipped scenarios parse"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// The game described by `players`; a scenario without players is the
    /// one-player game of its own cost data.
    pub fn game(&self) -> GameSpec {
        let players = self.players.clone().unwrap_or_else(|| {
            vec![PlayerSpec {
                psi: self.params.psi.clone(),
                cost: self.params.cost.clone(),
                budget: self.params.budget.clone(),
                b0: self.params.b0,
                forbidden_mask: self.params.forbidden_mask.clone(),
            }]
        });
        GameSpec { dynamics: self.params.clone(), players, delta_cap: self.delta_cap }
    }
}

/// Parses a measure file (`{"R", "breakpoints", "slices"}`).
pub fn parse_measure(text: &str) -> Result<TimeMeasure> {
    from_json_with_path(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenarios_parse_and_validate() {
        use crate::grid::Grid;
        use crate::model::validate_scenario;
        for name in Scenario::builtin_names() {
            let s = Scenario::builtin(name).unwrap();
            let (nx, nt) = s.grid.unwrap_or((101, 200));
            let report = validate_scenario(&s.params, &Grid::new(s.params.r, s.params.t, nx, nt).unwrap());
            assert!(report.is_admissible(), "{name}: {report:?}");
        }
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = Scenario::from_json(r#"{"alpha": 1, "h": [1, "x"], "cost": 0, "budget": 1}"#).unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, "h"),
            other => panic!("{other:?}"),
        }
        let err = Scenario::from_json(r#"{"alpha": 1, "h": 1, "cost": 0, "budget": 1, "gird": [3, 3]}"#).unwrap_err();
        assert!(err.to_string().contains("gird"), "{err}");
        let err = Scenario::from_json(r#"{"alpha": 1, "h": 1, "budget": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { ref path, .. } if path == "cost"));
        let err = Scenario::from_json(r#"{"alpha": 1, "h": 1, "cost": 0, "budget": 1, "psi": {"kind": "cubic"}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { ref path, .. } if path == "psi.kind"), "{err:?}");
    }

    #[test]
    fn defaults_fill_in() {
        let s = Scenario::from_json(r#"{"alpha": 2, "h": 0.5, "cost": 0.1, "budget": [2, 3]}"#).unwrap();
        assert_eq!(s.params.r, 1.0);
        assert_eq!(s.params.phi0, FieldSpec::Scalar(0.5));
        assert_eq!(s.params.b0, 2.0);
        assert_eq!(s.game().m(), 1);
    }

    #[test]
    fn measure_files_round_trip() {
        let text = r#"{"R": 1, "breakpoints": [0, 0.5, 1], "slices": [{"atoms": [[0.3, 0.5]]}, {"atoms": []}]}"#;
        let mu = parse_measure(text).unwrap();
        assert_eq!(mu.slices().len(), 2);
        let back = parse_measure(&serde_json::to_string(&mu).unwrap()).unwrap();
        assert_eq!(back, mu);
        let err = parse_measure(r#"{"R": 1, "breakpoints": [0, 1], "slices": [{"atoms": [[2.0, 1.0]]}]}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err:?}");
    }
}
