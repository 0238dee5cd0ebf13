//! Problem data: logistic growth law, cost aggregation, cost and budget
//! fields, initial density, and the derived constants used across the
//! solver and the optimality checks.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// A scalar function on `[0, T] x [0, R]`, given as a constant, a spatial
/// profile (constant in time), or a table with one row per time node.
/// Off-node values use (bi)linear interpolation on uniform nodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Scalar(f64),
    Profile(Vec<f64>),
    Table(Vec<Vec<f64>>),
}

impl<'de> Deserialize<'de> for FieldSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde_json::Value;
        const EXPECTED: &str = "expected a number, an array of numbers, or an array of equal-length arrays of numbers";
        let number = |v: &Value| v.as_f64().ok_or_else(|| D::Error::custom(EXPECTED));
        match Value::deserialize(d)? {
            Value::Number(n) => Ok(FieldSpec::Scalar(n.as_f64().ok_or_else(|| D::Error::custom(EXPECTED))?)),
            Value::Array(items) if items.iter().all(Value::is_number) => {
                Ok(FieldSpec::Profile(items.iter().map(number).collect::<std::result::Result<_, _>>()?))
            }
            Value::Array(rows) if rows.iter().all(Value::is_array) => {
                let mut table = Vec::with_capacity(rows.len());
                for row in &rows {
                    let row = row.as_array().expect("checked above");
                    table.push(row.iter().map(number).collect::<std::result::Result<Vec<_>, _>>()?);
                }
                Ok(FieldSpec::Table(table))
            }
            _ => Err(D::Error::custom(EXPECTED)),
        }
    }
}

fn lerp_uniform(values: &[f64], s: f64, len: f64) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let cells = (values.len() - 1) as f64;
    let u = (s / len * cells).clamp(0.0, cells);
    let i = (u.floor() as usize).min(values.len() - 2);
    let w = u - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

impl FieldSpec {
    pub fn eval(&self, t: f64, x: f64, r: f64, horizon: f64) -> f64 {
        match self {
            FieldSpec::Scalar(v) => *v,
            FieldSpec::Profile(p) => lerp_uniform(p, x, r),
            FieldSpec::Table(rows) => {
                let column: Vec<f64> = rows.iter().map(|row| lerp_uniform(row, x, r)).collect();
                lerp_uniform(&column, t, horizon)
            }
        }
    }

    /// Table nodes as `(t, x, value)`; extrema of the interpolant are attained here.
    pub fn nodes(&self, r: f64, horizon: f64) -> Vec<(f64, f64, f64)> {
        let pos = |i: usize, n: usize, len: f64| if n <= 1 { 0.0 } else { len * i as f64 / (n - 1) as f64 };
        match self {
            FieldSpec::Scalar(v) => vec![(0.0, 0.0, *v)],
            FieldSpec::Profile(p) => p.iter().enumerate().map(|(i, v)| (0.0, pos(i, p.len(), r), *v)).collect(),
            FieldSpec::Table(rows) => rows
                .iter()
                .enumerate()
                .flat_map(|(n, row)| {
                    row.iter().enumerate().map(move |(i, v)| (pos(n, rows.len(), horizon), pos(i, row.len(), r), *v))
                })
                .collect(),
        }
    }

    /// Time nodes of the table (empty when the field is constant in time).
    pub fn time_nodes(&self, horizon: f64) -> Vec<f64> {
        match self {
            FieldSpec::Table(rows) if rows.len() > 1 => {
                (0..rows.len()).map(|n| horizon * n as f64 / (rows.len() - 1) as f64).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        !matches!(self, FieldSpec::Table(rows) if rows.len() > 1)
    }

    pub fn min(&self) -> f64 {
        self.values().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = (self.min(), self.max());
        lo == hi
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            FieldSpec::Scalar(v) => Box::new(std::iter::once(*v)),
            FieldSpec::Profile(p) => Box::new(p.iter().copied()),
            FieldSpec::Table(rows) => Box::new(rows.iter().flatten().copied()),
        }
    }

    /// Node samples on `grid`, `(n_t + 1) x n_x` row-major.
    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        let mut out = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for n in 0..=grid.n_t {
            let t = grid.time(n);
            for i in 0..grid.n_x {
                out.push(self.eval(t, grid.x(i), grid.r, grid.t));
            }
        }
        out
    }

    fn check_shape(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Parse { path: name.to_string(), message: m });
        match self {
            FieldSpec::Scalar(_) => {}
            FieldSpec::Profile(p) if p.is_empty() => return bad("empty profile".into()),
            FieldSpec::Profile(_) => {}
            FieldSpec::Table(rows) => {
                if rows.is_empty() || rows[0].is_empty() {
                    return bad("empty table".into());
                }
                if rows.iter().any(|r| r.len() != rows[0].len()) {
                    return bad("table rows have different lengths".into());
                }
            }
        }
        if self.values().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }
}

impl From<f64> for FieldSpec {
    fn from(v: f64) -> Self {
        FieldSpec::Scalar(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiKind {
    Identity,
    Quadratic,
}

/// Cost aggregation `Psi`. The quadratic form is `c0 + c1 s + c2 s^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub kind: PsiKind,
    #[serde(default)]
    pub coeffs: Vec<f64>,
}

impl Psi {
    pub fn identity() -> Self {
        Psi { kind: PsiKind::Identity, coeffs: Vec::new() }
    }

    pub fn quadratic(c0: f64, c1: f64, c2: f64) -> Self {
        Psi { kind: PsiKind::Quadratic, coeffs: vec![c0, c1, c2] }
    }

    fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.kind {
            PsiKind::Identity => s,
            PsiKind::Quadratic => self.coeff(0) + self.coeff(1) * s + self.coeff(2) * s * s,
        }
    }

    pub fn d1(&self, s: f64) -> f64 {
        match self.kind {
            PsiKind::Identity => 1.0,
            PsiKind::Quadratic => self.coeff(1) + 2.0 * self.coeff(2) * s,
        }
    }

    pub fn d2(&self, _s: f64) -> f64 {
        match self.kind {
            PsiKind::Identity => 0.0,
            PsiKind::Quadratic => 2.0 * self.coeff(2),
        }
    }
}

/// Nodes where fishing is not allowed (`c = +inf`). Booleans on uniform
/// spatial nodes, optionally one row per time node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForbiddenMask {
    Profile(Vec<bool>),
    Table(Vec<Vec<bool>>),
}

impl ForbiddenMask {
    fn nearest(len: usize, s: f64, span: f64) -> usize {
        if len <= 1 {
            return 0;
        }
        ((s / span * (len - 1) as f64).round().max(0.0) as usize).min(len - 1)
    }

    pub fn is_forbidden(&self, t: f64, x: f64, r: f64, horizon: f64) -> bool {
        match self {
            ForbiddenMask::Profile(p) => !p.is_empty() && p[Self::nearest(p.len(), x, r)],
            ForbiddenMask::Table(rows) => {
                if rows.is_empty() {
                    return false;
                }
                let row = &rows[Self::nearest(rows.len(), t, horizon)];
                !row.is_empty() && row[Self::nearest(row.len(), x, r)]
            }
        }
    }

    pub fn sample(&self, grid: &Grid) -> Vec<bool> {
        let mut out = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for n in 0..=grid.n_t {
            for i in 0..grid.n_x {
                out.push(self.is_forbidden(grid.time(n), grid.x(i), grid.r, grid.t));
            }
        }
        out
    }

    /// Mask built from spatial intervals `[lo, hi]` on `n` uniform nodes.
    pub fn from_intervals(r: f64, n: usize, intervals: &[(f64, f64)]) -> Self {
        let nodes = (0..n)
            .map(|i| {
                let x = r * i as f64 / (n - 1) as f64;
                intervals.iter().any(|&(lo, hi)| x >= lo - 1e-12 && x <= hi + 1e-12)
            })
            .collect();
        ForbiddenMask::Profile(nodes)
    }
}

/// All scalar and function data of the harvesting model with logistic
/// growth `f(t, x, phi) = alpha(t, x) (h(t, x) - phi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub alpha: FieldSpec,
    pub h: FieldSpec,
    pub psi: Psi,
    pub cost: FieldSpec,
    pub budget: FieldSpec,
    pub b0: f64,
    pub phi0: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forbidden_mask: Option<ForbiddenMask>,
    /// Require a constant carrying capacity (the uniqueness regime).
    #[serde(default)]
    pub require_constant_h: bool,
}

impl ModelParams {
    /// Constant-coefficient scenario: `alpha`, `h`, `phi0`, cost and budget
    /// all constant, `Psi` the identity.
    pub fn uniform(alpha: f64, h: f64, phi0: f64, cost: f64, budget: f64) -> Self {
        ModelParams {
            r: 1.0,
            t: 1.0,
            alpha: alpha.into(),
            h: h.into(),
            psi: Psi::identity(),
            cost: cost.into(),
            budget: budget.into(),
            b0: budget,
            phi0: phi0.into(),
            forbidden_mask: None,
            require_constant_h: false,
        }
    }

    pub fn phi0_at(&self, x: f64) -> f64 {
        self.phi0.eval(0.0, x, self.r, self.t)
    }

    /// Largest value the cost pairing can take for a budget-feasible control.
    pub fn max_cost_inner(&self) -> f64 {
        self.cost.max().max(0.0) * self.t / self.b0
    }

    /// Structural checks that make the data usable at all (shapes, finiteness).
    pub fn check_well_formed(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::Parse { path: "R".into(), message: format!("must be positive, got {}", self.r) });
        }
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::Parse { path: "T".into(), message: format!("must be positive, got {}", self.t) });
        }
        if !self.b0.is_finite() {
            return Err(Error::Parse { path: "b0".into(), message: "must be finite".into() });
        }
        self.alpha.check_shape("alpha")?;
        self.h.check_shape("h")?;
        self.cost.check_shape("cost")?;
        self.budget.check_shape("budget")?;
        self.phi0.check_shape("phi0")?;
        if !self.phi0.is_time_independent() {
            return Err(Error::Parse { path: "phi0".into(), message: "initial datum must not depend on time".into() });
        }
        if self.psi.kind == PsiKind::Quadratic
            && (self.psi.coeffs.len() > 3 || self.psi.coeffs.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Parse {
                path: "psi.coeffs".into(),
                message: "quadratic needs up to 3 finite coefficients".into(),
            });
        }
        Ok(())
    }
}

/// Constants derived from the logistic law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Bound on `|d f / d phi|`.
    pub alpha1: f64,
    /// Lipschitz constant of `d f / d phi` (zero for the logistic law).
    pub alpha2: f64,
    /// `max(sup h, sup phi0)`: upper bound of the state.
    pub m: f64,
    /// `max f(t, x, 0)`.
    pub f: f64,
    /// `-max d f / d phi (t, x, h)`.
    pub h_star: f64,
}

fn lattice_size(specs: &[&FieldSpec], time: bool) -> usize {
    let mut n = 2usize;
    for s in specs {
        let k = match (s, time) {
            (FieldSpec::Scalar(_), _) => 1,
            (FieldSpec::Profile(_), true) => 1,
            (FieldSpec::Profile(p), false) => p.len(),
            (FieldSpec::Table(rows), true) => rows.len(),
            (FieldSpec::Table(rows), false) => rows[0].len(),
        };
        n = n.max(k);
    }
    4 * (n - 1) + 1
}

/// Derives the constants of the logistic model. Fails when the sampled
/// growth rate is not strictly positive somewhere, because then `d f / d phi`
/// is not strictly negative.
pub fn derive_constants(params: &ModelParams) -> Result<DerivedConstants> {
    params.check_well_formed()?;
    let alpha_min = params.alpha.min();
    if alpha_min <= 0.0 {
        return Err(Error::invalid(format!("d f / d phi = -alpha must be strictly negative; min alpha = {alpha_min}")));
    }
    // Products of interpolants can peak off the table nodes; scan a refined lattice.
    let nx = lattice_size(&[&params.alpha, &params.h], false);
    let nt = lattice_size(&[&params.alpha, &params.h], true);
    let mut f = f64::NEG_INFINITY;
    for n in 0..nt {
        let t = params.t * n as f64 / (nt - 1) as f64;
        for i in 0..nx {
            let x = params.r * i as f64 / (nx - 1) as f64;
            f = f.max(params.alpha.eval(t, x, params.r, params.t) * params.h.eval(t, x, params.r, params.t));
        }
    }
    for (t, x, _) in params.alpha.nodes(params.r, params.t).into_iter().chain(params.h.nodes(params.r, params.t)) {
        f = f.max(params.alpha.eval(t, x, params.r, params.t) * params.h.eval(t, x, params.r, params.t));
    }
    Ok(DerivedConstants {
        alpha1: params.alpha.max(),
        alpha2: 0.0,
        m: params.h.max().max(params.phi0.max()),
        f,
        h_star: alpha_min,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub hypothesis: String,
    /// `(t, x)` of the first offending node, when the check is pointwise.
    pub location: Option<(f64, f64)>,
    pub count: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, hypothesis: &str) -> bool {
        self.violations.iter().any(|v| v.hypothesis == hypothesis)
    }

    fn pointwise(&mut self, hypothesis: &str, detail: &str, nodes: impl Iterator<Item = (f64, f64, bool)>) {
        let mut first = None;
        let mut count = 0;
        for (t, x, bad) in nodes {
            if bad {
                count += 1;
                first.get_or_insert((t, x));
            }
        }
        if count > 0 {
            self.violations.push(Violation {
                hypothesis: hypothesis.to_string(),
                location: first,
                count,
                detail: detail.to_string(),
            });
        }
    }

    fn global(&mut self, hypothesis: &str, detail: String) {
        self.violations.push(Violation { hypothesis: hypothesis.to_string(), location: None, count: 1, detail });
    }
}

/// Lists every violated standing hypothesis. Never fails: malformed data
/// shows up as violations.
pub fn validate_scenario(params: &ModelParams, grid: &Grid) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = params.check_well_formed() {
        report.global("(format)", e.to_string());
        return report;
    }
    if !grid.same_box(params.r, params.t) {
        report.global(
            "(domain)",
            format!("grid box [0,{}]x[0,{}] differs from scenario [0,{}]x[0,{}]", grid.t, grid.r, params.t, params.r),
        );
    }
    let (r, t) = (params.r, params.t);
    let check = |spec: &FieldSpec, pred: &dyn Fn(f64) -> bool| {
        spec.nodes(r, t).into_iter().map(move |(tt, x, v)| (tt, x, !pred(v))).collect::<Vec<_>>()
    };
    report.pointwise("(H.1)", "growth rate alpha must be >= 0", check(&params.alpha, &|v| v >= 0.0).into_iter());
    report.pointwise("(H.1)", "carrying capacity h must be >= 0", check(&params.h, &|v| v >= 0.0).into_iter());
    report.pointwise("(H: φ₀ ≥ 0)", "initial density must be >= 0", check(&params.phi0, &|v| v >= 0.0).into_iter());
    report.pointwise("(H.3)", "cost c must be >= 0", check(&params.cost, &|v| v >= 0.0).into_iter());
    if params.b0 <= 0.0 {
        report.global("(H.5)", format!("b0 must be > 0, got {}", params.b0));
    }
    let b0 = params.b0;
    report.pointwise("(H.5)", "budget b must be >= b0", check(&params.budget, &|v| v >= b0).into_iter());

    let s_max = params.max_cost_inner().max(1.0);
    let samples = 65;
    let mut mono = None;
    let mut conv = None;
    for k in 0..samples {
        let s = s_max * k as f64 / (samples - 1) as f64;
        if params.psi.d1(s) < 0.0 && mono.is_none() {
            mono = Some(s);
        }
        if params.psi.d2(s) < 0.0 && conv.is_none() {
            conv = Some(s);
        }
    }
    if let Some(s) = mono {
        report.global("(H.4)", format!("Psi must be nondecreasing; Psi'({s}) < 0"));
    }
    if let Some(s) = conv {
        report.global("(H.4)", format!("Psi must be convex; Psi''({s}) < 0"));
    }
    if params.require_constant_h && !params.h.is_constant() {
        report.global("(H.6)", format!("h must be constant, ranges over [{}, {}]", params.h.min(), params.h.max()));
    }
    // semi-implicit logistic step keeps 0 <= phi <= M when dt * alpha * M < 1
    let m_bound = params.h.max().max(params.phi0.max());
    let growth = (0..=grid.n_t)
        .flat_map(|n| (0..grid.n_x).map(move |i| (n, i)))
        .map(|(n, i)| params.alpha.eval(grid.time(n), grid.x(i), r, t) * m_bound)
        .fold(0.0f64, f64::max);
    if grid.dt() * growth >= 1.0 {
        report.global(
            "(scheme)",
            format!("dt * max(alpha) * M = {} must be < 1 for the positivity-preserving step", grid.dt() * growth),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_for_unit_logistic() {
        let p = ModelParams::uniform(1.0, 1.0, 1.0, 0.0, 1.0);
        let c = derive_constants(&p).unwrap();
        assert_eq!(c, DerivedConstants { alpha1: 1.0, alpha2: 0.0, m: 1.0, f: 1.0, h_star: 1.0 });
    }

    #[test]
    fn m_takes_the_larger_of_h_and_phi0() {
        let p = ModelParams::uniform(2.0, 0.5, 0.8, 0.0, 1.0);
        let c = derive_constants(&p).unwrap();
        assert_eq!(c.m, 0.8);
        assert_eq!(c.alpha1, 2.0);
        assert_eq!(c.f, 1.0);
    }

    #[test]
    fn h_star_is_the_grid_minimum_of_alpha() {
        let mut p = ModelParams::uniform(1.0, 1.0, 1.0, 0.0, 1.0);
        p.alpha = FieldSpec::Profile((0..=20).map(|i| 1.0 + i as f64 / 20.0).collect());
        let c = derive_constants(&p).unwrap();
        // grid minimum oracle
        let oracle = (0..=1000).map(|i| p.alpha.eval(0.0, i as f64 / 1000.0, 1.0, 1.0)).fold(f64::INFINITY, f64::min);
        assert_eq!(c.h_star, oracle);
        assert_eq!(c.h_star, 1.0);
        assert_eq!(c.alpha1, 2.0);
    }

    #[test]
    fn rejects_nonnegative_derivative() {
        let p = ModelParams::uniform(0.0, 1.0, 1.0, 0.0, 1.0);
        assert!(derive_constants(&p).is_err());
    }

    #[test]
    fn flags_negative_initial_density() {
        let mut p = ModelParams::uniform(1.0, 1.0, 1.0, 0.0, 1.0);
        p.phi0 = FieldSpec::Profile(vec![1.0, 0.5, -0.1, 0.5]);
        let g = Grid::new(1.0, 1.0, 11, 20).unwrap();
        let rep = validate_scenario(&p, &g);
        assert!(rep.has("(H: φ₀ ≥ 0)"));
        let v = rep.violations.iter().find(|v| v.hypothesis == "(H: φ₀ ≥ 0)").unwrap();
        assert!((v.location.unwrap().1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn flags_budget_below_floor() {
        let mut p = ModelParams::uniform(1.0, 1.0, 1.0, 0.0, 2.0);
        p.budget = FieldSpec::Profile(vec![2.0, 1.5, 2.0]);
        let g = Grid::new(1.0, 1.0, 11, 20).unwrap();
        assert!(validate_scenario(&p, &g).has("(H.5)"));
    }

    #[test]
    fn admissible_scenario_has_empty_report() {
        let p = ModelParams::uniform(1.0, 1.0, 1.0, 0.2, 1.0);
        let g = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let rep = validate_scenario(&p, &g);
        assert!(rep.is_admissible(), "{:?}", rep);
    }

    #[test]
    fn flags_concave_psi_and_varying_h() {
        let mut p = ModelParams::uniform(1.0, 1.0, 1.0, 0.2, 1.0);
        p.psi = Psi::quadratic(0.0, 1.0, -0.1);
        p.h = FieldSpec::Profile(vec![1.0, 0.9]);
        p.require_constant_h = true;
        let g = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let rep = validate_scenario(&p, &g);
        assert!(rep.has("(H.4)"));
        assert!(rep.has("(H.6)"));
    }

    #[test]
    fn field_spec_parses_all_shapes() {
        let s: FieldSpec = serde_json::from_str("2.5").unwrap();
        assert_eq!(s, FieldSpec::Scalar(2.5));
        let p: FieldSpec = serde_json::from_str("[1, 2, 3]").unwrap();
        assert_eq!(p.eval(0.0, 0.25, 1.0, 1.0), 1.5);
        let t: FieldSpec = serde_json::from_str("[[0, 0], [2, 4]]").unwrap();
        assert_eq!(t.eval(0.5, 1.0, 1.0, 1.0), 2.0);
        assert!(serde_json::from_str::<FieldSpec>("\"x\"").is_err());
        assert!(serde_json::from_str::<FieldSpec>("[[1], 2]").is_err());
    }

    #[test]
    fn forbidden_mask_uses_nearest_node() {
        let m = ForbiddenMask::from_intervals(1.0, 11, &[(0.4, 0.6)]);
        assert!(m.is_forbidden(0.0, 0.5, 1.0, 1.0));
        assert!(m.is_forbidden(0.0, 0.42, 1.0, 1.0));
        assert!(!m.is_forbidden(0.0, 0.3, 1.0, 1.0));
    }
}
