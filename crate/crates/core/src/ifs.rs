//! Gasket-type iterated function systems and finite families of them.
//!
//! Every map of an [`IfsSpec`] sends the reference cell `V_0` (the `d+1`
//! vertices of a simplex) onto one level-1 cell. The combinatorics of the
//! level-1 network is kept as a gluing table: level-1 vertex ids, with ids
//! `0..=d` reserved for the images of `V_0` itself. For the planar catalog
//! members the table is derived from exact affine placements written in
//! lattice coordinates `(a, b) = a·e1 + b·e2`, `e1 = (1, 0)`,
//! `e2 = (1/2, √3/2)`, so `V_0 = {(0,0), (1,0), (0,1)}`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::WeightSystem;

pub type Rational = Ratio<i64>;

/// Default tolerance for harmonic-structure checks.
pub const HARMONIC_TOL: f64 = 1e-9;

/// Default grid size when quantizing a parametric `ℓ` distribution.
pub const DEFAULT_GRID: usize = 64;

/// Affine placement `x ↦ scale·R·x + offset` in lattice coordinates, where
/// `R` is the identity or the half turn `-I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub scale: Rational,
    pub offset: [Rational; 2],
    pub half_turn: bool,
}

impl Placement {
    fn up(scale: Rational, a: Rational, b: Rational) -> Self {
        Self { scale, offset: [a, b], half_turn: false }
    }

    /// Image of a lattice point.
    pub fn apply(&self, p: [Rational; 2]) -> [Rational; 2] {
        let s = if self.half_turn { -self.scale } else { self.scale };
        [s * p[0] + self.offset[0], s * p[1] + self.offset[1]]
    }
}

/// Reference cell `V_0` in lattice coordinates.
pub fn reference_cell() -> [[Rational; 2]; 3] {
    let z = Rational::zero();
    let o = Rational::one();
    [[z, z], [o, z], [z, o]]
}

/// One iterated function system of the family.
#[derive(Debug, Clone, PartialEq)]
pub struct IfsSpec {
    id: String,
    ambient_dim: usize,
    length_ratios: Vec<Rational>,
    resistance_ratios: Vec<Rational>,
    /// Level-1 vertex ids of each cell, listed in `V_0` order.
    cells: Vec<Vec<usize>>,
    num_vertices: usize,
    placements: Option<Vec<Placement>>,
    ell: Vec<f64>,
    r: Vec<f64>,
    rho: Vec<f64>,
}

impl IfsSpec {
    /// Builds a spec from a combinatorial gluing table. Vertex ids `0..=d`
    /// must be the images of `V_0`.
    pub fn from_gluing(
        id: impl Into<String>,
        ambient_dim: usize,
        length_ratios: Vec<Rational>,
        resistance_ratios: Vec<Rational>,
        cells: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let id = id.into();
        let n = length_ratios.len();
        if ambient_dim < 2 {
            return Err(Error::Validation(format!("{id}: ambient dimension must be at least 2")));
        }
        if n < 3 {
            return Err(Error::Validation(format!("{id}: N = {n} violates N_inf >= 3")));
        }
        if resistance_ratios.len() != n || cells.len() != n {
            return Err(Error::Validation(format!("{id}: ratio/cell counts disagree")));
        }
        let zero = Rational::zero();
        let one = Rational::one();
        for (i, (l, r)) in length_ratios.iter().zip(&resistance_ratios).enumerate() {
            if *l <= zero || *l >= one {
                return Err(Error::Validation(format!("{id}: length ratio {i} = {l} outside (0,1)")));
            }
            if *r <= zero || *r >= one {
                return Err(Error::Validation(format!(
                    "{id}: resistance ratio {i} = {r} violates 0 < r < 1 (r_sup < 1)"
                )));
            }
        }
        let mut num_vertices = ambient_dim + 1;
        for (i, c) in cells.iter().enumerate() {
            if c.len() != ambient_dim + 1 {
                return Err(Error::Validation(format!("{id}: cell {i} must list d+1 vertices")));
            }
            let mut sorted = c.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != c.len() {
                return Err(Error::Validation(format!("{id}: cell {i} repeats a vertex")));
            }
            num_vertices = num_vertices.max(c.iter().max().unwrap() + 1);
        }
        for i in 0..n {
            for j in i + 1..n {
                let shared = cells[i].iter().filter(|v| cells[j].contains(v)).count();
                if shared > 1 {
                    return Err(Error::Validation(format!(
                        "{id}: cells {i} and {j} share {shared} vertices (at most one allowed)"
                    )));
                }
            }
        }
        let ell = length_ratios.iter().map(to_f64).collect();
        let r = resistance_ratios.iter().map(to_f64).collect();
        let rho = resistance_ratios.iter().map(|r| to_f64(&r.recip())).collect();
        Ok(Self {
            id,
            ambient_dim,
            length_ratios,
            resistance_ratios,
            cells,
            num_vertices,
            placements: None,
            ell,
            r,
            rho,
        })
    }

    /// Builds a planar spec from exact placements; the gluing table is
    /// derived by identifying equal lattice points.
    pub fn from_placements(
        id: impl Into<String>,
        placements: Vec<Placement>,
        resistance_ratios: Vec<Rational>,
    ) -> Result<Self> {
        let mut ids: HashMap<[Rational; 2], usize> = HashMap::new();
        for (k, p) in reference_cell().into_iter().enumerate() {
            ids.insert(p, k);
        }
        let mut cells = Vec::with_capacity(placements.len());
        for pl in &placements {
            let mut cell = Vec::with_capacity(3);
            for p in reference_cell() {
                let q = pl.apply(p);
                let next = ids.len();
                cell.push(*ids.entry(q).or_insert(next));
            }
            cells.push(cell);
        }
        let lengths = placements.iter().map(|p| p.scale).collect();
        let mut spec = Self::from_gluing(id, 2, lengths, resistance_ratios, cells)?;
        spec.placements = Some(placements);
        Ok(spec)
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn num_maps(&self) -> usize {
        self.length_ratios.len()
    }
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    pub fn length_ratios(&self) -> &[Rational] {
        &self.length_ratios
    }
    pub fn resistance_ratios(&self) -> &[Rational] {
        &self.resistance_ratios
    }
    /// `ρ_i = 1/r_i`, exact.
    pub fn conductance_ratios(&self) -> Vec<Rational> {
        self.resistance_ratios.iter().map(|r| r.recip()).collect()
    }
    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }
    pub fn num_level1_vertices(&self) -> usize {
        self.num_vertices
    }
    pub fn placements(&self) -> Option<&[Placement]> {
        self.placements.as_deref()
    }
    pub fn ell(&self) -> &[f64] {
        &self.ell
    }
    pub fn r(&self) -> &[f64] {
        &self.r
    }
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }
}

pub(crate) fn to_f64(q: &Rational) -> f64 {
    q.numer().to_f64().unwrap() / q.denom().to_f64().unwrap()
}

fn q(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

/// The standard level-2 or level-3 Sierpinski gasket.
pub fn make_sg(level: u32) -> Result<IfsSpec> {
    match level {
        2 => {
            let h = q(1, 2);
            let z = Rational::zero();
            let placements = vec![Placement::up(h, z, z), Placement::up(h, h, z), Placement::up(h, z, h)];
            IfsSpec::from_placements("SG2", placements, vec![q(3, 5); 3])
        }
        3 => {
            let t = q(1, 3);
            let z = Rational::zero();
            let tt = q(2, 3);
            let placements = vec![
                Placement::up(t, z, z),
                Placement::up(t, t, z),
                Placement::up(t, tt, z),
                Placement::up(t, z, t),
                Placement::up(t, t, t),
                Placement::up(t, z, tt),
            ];
            IfsSpec::from_placements("SG3", placements, vec![q(7, 15); 6])
        }
        other => Err(Error::UnsupportedCatalogEntry(format!("SG({other}) is not in the catalog"))),
    }
}

/// Member of the seven-map family interpolating between SG(3) (`ℓ → 1/3`)
/// and the slit triangle (`ℓ → 1/2`). Corner cells have side `ℓ`, the three
/// side cells `1-2ℓ` and the inverted centre cell `3ℓ-1`; resistances are
/// proportional to side length with factor `(ℓ+2)/(2ℓ+1)`.
pub fn make_interpolating(ell: Rational) -> Result<IfsSpec> {
    if ell <= q(1, 3) || ell >= q(1, 2) {
        return Err(Error::DegenerateFamily(format!("ell = {ell} must lie strictly inside (1/3, 1/2)")));
    }
    let one = Rational::one();
    let z = Rational::zero();
    let side = one - ell * 2;
    let centre = ell * 3 - one;
    let placements = vec![
        Placement::up(ell, z, z),
        Placement::up(ell, one - ell, z),
        Placement::up(ell, z, one - ell),
        Placement::up(side, ell, z),
        Placement::up(side, z, ell),
        Placement::up(side, ell, ell),
        Placement { scale: centre, offset: [ell, ell], half_turn: true },
    ];
    let factor = (ell + 2) / (ell * 2 + 1);
    let resistances = placements.iter().map(|p| factor * p.scale).collect();
    IfsSpec::from_placements(format!("F({ell})"), placements, resistances)
}

/// Distribution of `ℓ` over `(1/3, 1/2)` for the parametric family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum EllDistribution {
    Uniform,
    /// Beta(a, b) rescaled onto `(1/3, 1/2)`.
    Beta {
        a: f64,
        b: f64,
    },
}

impl EllDistribution {
    fn density(&self, u: f64) -> f64 {
        match *self {
            EllDistribution::Uniform => 1.0,
            EllDistribution::Beta { a, b } => u.powf(a - 1.0) * (1.0 - u).powf(b - 1.0),
        }
    }
}

/// Finite family `F` with selection probabilities `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    members: Vec<IfsSpec>,
    probabilities: Vec<f64>,
}

impl FamilySpec {
    pub fn new(members: Vec<(IfsSpec, f64)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Validation("family has no members".into()));
        }
        let (members, probabilities): (Vec<_>, Vec<_>) = members.into_iter().unzip();
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation("probabilities must be nonnegative".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
        }
        let d = members[0].ambient_dim();
        if members.iter().any(|m| m.ambient_dim() != d) {
            return Err(Error::Validation("members must share the ambient dimension".into()));
        }
        Ok(Self { members, probabilities })
    }

    pub fn single(ifs: IfsSpec) -> Self {
        Self { members: vec![ifs], probabilities: vec![1.0] }
    }

    /// Interpolating family with `ℓ` drawn from `law`, quantized to `grid`
    /// midpoints of `(1/3, 1/2)`.
    pub fn interpolating_grid(law: EllDistribution, grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Parameter("grid must be positive".into()));
        }
        let g = grid as i64;
        let mut members = Vec::with_capacity(grid);
        let mut masses = Vec::with_capacity(grid);
        for j in 0..g {
            // midpoint 1/3 + (j + 1/2)/(6g)
            let ell = Rational::new(4 * g + 2 * j + 1, 12 * g);
            let u = (j as f64 + 0.5) / g as f64;
            members.push(make_interpolating(ell)?);
            masses.push(law.density(u));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter("density integrates to zero on the grid".into()));
        }
        Self::new(members.into_iter().zip(masses.into_iter().map(|m| m / total)).collect())
    }

    pub fn members(&self) -> &[IfsSpec] {
        &self.members
    }
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
    pub fn ambient_dim(&self) -> usize {
        self.members[0].ambient_dim()
    }
    pub fn max_maps(&self) -> usize {
        self.members.iter().map(IfsSpec::num_maps).max().unwrap_or(0)
    }
    /// True when one member carries all the probability mass.
    pub fn is_degenerate(&self) -> Option<usize> {
        let live: Vec<usize> = (0..self.len()).filter(|&i| self.probabilities[i] > 0.0).collect();
        (live.len() == 1).then(|| live[0])
    }
}

/// Family-level extrema used throughout the estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleBounds {
    pub n_inf: usize,
    pub n_sup: usize,
    pub ell_inf: f64,
    pub r_inf: f64,
    pub r_sup: f64,
    pub rho_inf: f64,
    pub rho_sup: f64,
    pub w_inf: Option<f64>,
    pub w_sup: Option<f64>,
    pub eta: Option<f64>,
    pub eta_hat: Option<f64>,
}

/// Extrema over the members carrying positive probability; fails if any of
/// the standing bounds is violated.
pub fn validate_family(family: &FamilySpec, weights: Option<&WeightSystem>) -> Result<ScaleBounds> {
    let live: Vec<&IfsSpec> =
        family.members().iter().zip(family.probabilities()).filter(|(_, p)| **p > 0.0).map(|(m, _)| m).collect();
    if live.is_empty() {
        return Err(Error::Validation("family has no members".into()));
    }
    let n_inf = live.iter().map(|m| m.num_maps()).min().unwrap();
    let n_sup = live.iter().map(|m| m.num_maps()).max().unwrap();
    if n_inf < 3 {
        return Err(Error::Validation(format!("N_inf = {n_inf} violates N_inf >= 3")));
    }
    let fold = |f: &dyn Fn(&IfsSpec) -> &[f64], min: bool| {
        live.iter()
            .flat_map(|m| f(m).iter().copied())
            .fold(if min { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| if min { a.min(b) } else { a.max(b) })
    };
    let ell_inf = fold(&|m| m.ell(), true);
    let r_inf = fold(&|m| m.r(), true);
    let r_sup = fold(&|m| m.r(), false);
    let rho_inf = fold(&|m| m.rho(), true);
    let rho_sup = fold(&|m| m.rho(), false);
    if !(r_sup < 1.0) {
        return Err(Error::Validation(format!("r_sup = {r_sup} violates r_sup < 1")));
    }
    if !(r_inf > 0.0) || !(ell_inf > 0.0) {
        return Err(Error::Validation("ratios must be positive".into()));
    }
    let (mut w_inf, mut w_sup, mut eta, mut eta_hat) = (None, None, None, None);
    if let Some(ws) = weights {
        let resolved = ws.resolve(family)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (k, w) in resolved.iter().enumerate() {
            if family.probabilities()[k] <= 0.0 {
                continue;
            }
            for &x in w {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(Error::Validation(format!("weights must satisfy 0 < w_inf <= w_sup < inf (got {lo}, {hi})")));
        }
        w_inf = Some(lo);
        w_sup = Some(hi);
        eta = Some(r_inf * lo / (n_sup as f64 * hi));
        eta_hat = Some(n_inf as f64 * lo / (n_sup as f64 * hi));
    }
    Ok(ScaleBounds { n_inf, n_sup, ell_inf, r_inf, r_sup, rho_inf, rho_sup, w_inf, w_sup, eta, eta_hat })
}

/// Result of tracing the level-1 network onto `V_0`.
#[derive(Debug, Clone)]
pub struct HarmonicTrace {
    /// Effective (Schur complement) conductance matrix on `V_0`.
    pub conductance: DMatrix<f64>,
    /// Largest deviation of an off-diagonal effective conductance from 1.
    pub max_deviation: f64,
    pub passed: bool,
}

impl HarmonicTrace {
    /// Effective resistance between two distinct points of `V_0`.
    pub fn corner_resistance(&self, a: usize, b: usize) -> Result<f64> {
        let d = self.conductance.nrows();
        // ground b, inject unit current at a
        let keep: Vec<usize> = (0..d).filter(|&i| i != b).collect();
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| self.conductance[(keep[i], keep[j])]);
        let mut rhs = nalgebra::DVector::zeros(keep.len());
        let ia = keep.iter().position(|&i| i == a).ok_or_else(|| Error::Parameter("a == b".into()))?;
        rhs[ia] = 1.0;
        let v = sub.lu().solve(&rhs).ok_or_else(|| Error::IllPosedNetwork("traced form is singular".into()))?;
        Ok(v[ia])
    }
}

/// Builds the level-1 network (conductance `ρ_i` on every edge of cell `i`),
/// eliminates the interior vertices, and compares the result with the unit
/// form on `V_0`.
pub fn harmonic_trace_check(ifs: &IfsSpec, tol: f64) -> Result<HarmonicTrace> {
    let n = ifs.num_level1_vertices();
    let b = ifs.ambient_dim() + 1;
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for (cell, &rho) in ifs.cells().iter().zip(ifs.rho()) {
        for (a, &x) in cell.iter().enumerate() {
            for &y in &cell[a + 1..] {
                lap[(x, y)] -= rho;
                lap[(y, x)] -= rho;
                lap[(x, x)] += rho;
                lap[(y, y)] += rho;
            }
        }
    }
    let interior = n - b;
    let conductance = if interior == 0 {
        lap.view((0, 0), (b, b)).into_owned()
    } else {
        let abb = lap.view((0, 0), (b, b)).into_owned();
        let abi = lap.view((0, b), (b, interior)).into_owned();
        let aii = lap.view((b, b), (interior, interior)).into_owned();
        let chol = aii
            .cholesky()
            .ok_or_else(|| Error::IllPosedNetwork(format!("{}: interior block is singular", ifs.id())))?;
        let x = chol.solve(&abi.transpose());
        abb - abi * x
    };
    let mut max_deviation: f64 = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                max_deviation = max_deviation.max((-conductance[(i, j)] - 1.0).abs());
            }
        }
    }
    Ok(HarmonicTrace { conductance, max_deviation, passed: max_deviation <= tol })
}

// ---------------------------------------------------------------------------
// Catalog documents

/// One serialized member: rationals travel as `"p/q"` strings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MemberDoc {
    pub id: String,
    pub num_maps: usize,
    pub length_ratios: Vec<String>,
    pub resistance_ratios: Vec<String>,
    pub probability: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CatalogDoc {
    pub member: Vec<MemberDoc>,
}

pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    let bad = || Error::Parse(format!("not a rational: {s:?}"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i64 = n.trim().parse().map_err(|_| bad())?;
            let d: i64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ok(Rational::new(n, d))
        }
        None => s.parse::<i64>().map(Rational::from_integer).map_err(|_| bad()),
    }
}

pub fn format_rational(q: &Rational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

fn parse_probability(s: &str) -> Result<f64> {
    if s.contains('/') {
        Ok(to_f64(&parse_rational(s)?))
    } else {
        s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("not a probability: {s:?}")))
    }
}

/// Rebuilds a catalog member by id (`SG2`, `SG3`, `F(p/q)`) when possible,
/// otherwise falls back to a combinatorial-only spec without geometry.
fn member_from_doc(doc: &MemberDoc) -> Result<IfsSpec> {
    let lengths = doc.length_ratios.iter().map(|s| parse_rational(s)).collect::<Result<Vec<_>>>()?;
    let resistances = doc.resistance_ratios.iter().map(|s| parse_rational(s)).collect::<Result<Vec<_>>>()?;
    if lengths.len() != doc.num_maps || resistances.len() != doc.num_maps {
        return Err(Error::Parse(format!("{}: num_maps disagrees with ratio arrays", doc.id)));
    }
    let known = match doc.id.as_str() {
        "SG2" => Some(make_sg(2)?),
        "SG3" => Some(make_sg(3)?),
        id if id.starts_with("F(") && id.ends_with(')') => {
            Some(make_interpolating(parse_rational(&id[2..id.len() - 1])?)?)
        }
        _ => None,
    };
    match known {
        Some(spec) if spec.length_ratios == lengths => {
            if spec.resistance_ratios == resistances {
                Ok(spec)
            } else {
                // same geometry, user-supplied resistances
                let mut custom = IfsSpec::from_gluing(doc.id.clone(), 2, lengths, resistances, spec.cells.clone())?;
                custom.placements = spec.placements.clone();
                Ok(custom)
            }
        }
        Some(_) => Err(Error::Parse(format!("{}: length ratios do not match the catalog geometry", doc.id))),
        None => Err(Error::UnsupportedCatalogEntry(format!("{}: no gluing geometry is known for this id", doc.id))),
    }
}

impl FamilySpec {
    pub fn to_doc(&self) -> CatalogDoc {
        CatalogDoc {
            member: self
                .members
                .iter()
                .zip(&self.probabilities)
                .map(|(m, p)| MemberDoc {
                    id: m.id.clone(),
                    num_maps: m.num_maps(),
                    length_ratios: m.length_ratios.iter().map(format_rational).collect(),
                    resistance_ratios: m.resistance_ratios.iter().map(format_rational).collect(),
                    probability: format!("{p:?}"),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &CatalogDoc) -> Result<Self> {
        let members = doc
            .member
            .iter()
            .map(|m| Ok((member_from_doc(m)?, parse_probability(&m.probability)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_doc()).expect("catalog documents always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: CatalogDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_doc(&doc)
    }
}

/// Exact check that `r_i·ρ_i = 1` for every map.
pub fn reciprocity_holds(ifs: &IfsSpec) -> bool {
    ifs.resistance_ratios.iter().zip(ifs.conductance_ratios()).all(|(r, rho)| (*r * rho).is_one() && r.is_positive())
}
