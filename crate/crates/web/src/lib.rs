//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Every export takes the SG(2) probability `p` of the two-member family
//! {SG(2), SG(3)} and returns a JSON string. The `*_json` functions hold the
//! logic so native tests can call them without a JS runtime.

use std::sync::Arc;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vvsl::graph::build_graph;
use vvsl::ifs::{make_sg, FamilySpec};
use vvsl::measures::WeightSystem;
use vvsl::pressure::{solve_dimension, McParams, PressureKind, STAT_TOL};
use vvsl::spectral::{log_grid, spectral_slope, BoundaryCondition, CountingCurve, EigenProblem, FitWindow};
use vvsl::vtree::{neck_probability, VTree};
use vvsl::{Error, Result};

/// Largest graph the page will draw or count on.
pub const VERTEX_CAP: usize = 30_000;

fn family(p: f64) -> Result<Arc<FamilySpec>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("p = {p} must lie in [0, 1]")));
    }
    let members = match p {
        p if p == 1.0 => vec![(make_sg(2)?, 1.0)],
        p if p == 0.0 => vec![(make_sg(3)?, 1.0)],
        p => vec![(make_sg(2)?, p), (make_sg(3)?, 1.0 - p)],
    };
    Ok(Arc::new(FamilySpec::new(members)?))
}

fn weights(name: &str, f: &Arc<FamilySpec>, v: usize, seed: u64) -> Result<WeightSystem> {
    match name {
        "unit" => Ok(WeightSystem::Unit),
        "conductance" => Ok(WeightSystem::Conductance),
        "flat" => {
            let mc = McParams { segments: 100, replicas: 16, seed };
            let d = solve_dimension(&PressureKind::Resistance, f.clone(), v, mc, STAT_TOL)?;
            Ok(WeightSystem::flat(d.root))
        }
        other => Err(Error::Parameter(format!("unknown weights {other:?}"))),
    }
}

fn check_v(v: u32) -> Result<usize> {
    if v == 0 || v > 16 {
        return Err(Error::Parameter(format!("V = {v} must lie in 1..=16")));
    }
    Ok(v as usize)
}

#[derive(Serialize)]
struct Gasket {
    vertices: Vec<[f64; 2]>,
    edges: Vec<[usize; 2]>,
    /// Family member used by each type, one row per level.
    levels: Vec<Vec<usize>>,
    necks: Vec<usize>,
}

/// Coordinates and edges of the level-`depth` prefractal graph.
pub fn gasket_json(p: f64, v: u32, depth: u32, seed: u32) -> Result<String> {
    let f = family(p)?;
    let mut tree = VTree::new(f, check_v(v)?, seed as u64)?;
    let depth = depth as usize;
    if depth > 8 {
        return Err(Error::SizeCap(format!("depth {depth} is too deep to draw (max 8)")));
    }
    let g = build_graph(&mut tree, depth, &WeightSystem::Unit)?;
    if g.num_vertices > VERTEX_CAP {
        return Err(Error::SizeCap(format!("{} vertices (cap {VERTEX_CAP})", g.num_vertices)));
    }
    let vertices = g.coords.clone().ok_or_else(|| Error::Parameter("graph has no coordinates".into()))?;
    let edges = g.edges.iter().map(|&(a, b, _)| [a, b]).collect();
    let levels = tree.envs().iter().take(depth).map(|e| e.entries.iter().map(|x| x.ifs).collect()).collect();
    let necks = tree.necks_up_to(depth)?;
    Ok(serde_json::to_string(&Gasket { vertices, edges, levels, necks }).unwrap())
}

#[derive(Serialize)]
struct Estimate {
    value: f64,
    se: f64,
}

#[derive(Serialize)]
struct Dimensions {
    hausdorff: Estimate,
    resistance: Estimate,
    spectral_flat: Estimate,
    spectral_unit: Estimate,
    /// `2 d_r/(d_r+1)`, what the flat spectral value should equal.
    flat_prediction: f64,
    neck_probability: f64,
}

/// Monte Carlo pressure roots at a size the browser finishes in seconds.
pub fn dimensions_json(p: f64, v: u32, seed: u32) -> Result<String> {
    let f = family(p)?;
    let v = check_v(v)?;
    let mc = McParams { segments: 100, replicas: 16, seed: seed as u64 };
    let solve = |k: PressureKind, s: u64| -> Result<Estimate> {
        let d = solve_dimension(&k, f.clone(), v, McParams { seed: mc.seed.wrapping_add(s), ..mc }, STAT_TOL)?;
        Ok(Estimate { value: d.root, se: d.se })
    };
    let hausdorff = solve(PressureKind::Hausdorff, 0)?;
    let resistance = solve(PressureKind::Resistance, 0)?;
    let spectral_flat = solve(PressureKind::Spectral(WeightSystem::flat(resistance.value)), 1)?;
    let spectral_unit = solve(PressureKind::Spectral(WeightSystem::Unit), 1)?;
    let flat_prediction = 2.0 * resistance.value / (resistance.value + 1.0);
    let out = Dimensions {
        hausdorff,
        resistance,
        spectral_flat,
        spectral_unit,
        flat_prediction,
        neck_probability: neck_probability(&f, v),
    };
    Ok(serde_json::to_string(&out).unwrap())
}

#[derive(Serialize)]
struct Counting {
    vertices: usize,
    points: Vec<(f64, usize)>,
    slope: f64,
    fit: [f64; 2],
}

/// Eigenvalue counting function `N(λ)` on a log grid, with its fitted slope.
pub fn counting_json(p: f64, v: u32, depth: u32, seed: u32, bc: &str, weights_name: &str) -> Result<String> {
    let f = family(p)?;
    let v = check_v(v)?;
    let bc: BoundaryCondition = bc.parse()?;
    let w = weights(weights_name, &f, v, seed as u64)?;
    let mut tree = VTree::new(f, v, seed as u64)?;
    let g = build_graph(&mut tree, depth as usize, &w)?;
    if g.num_vertices > VERTEX_CAP {
        return Err(Error::SizeCap(format!("{} vertices (cap {VERTEX_CAP})", g.num_vertices)));
    }
    let prob = EigenProblem::new(&g, bc)?;
    let fit = spectral_slope(&prob, FitWindow::resolved(&g, bc))?;
    let hi = prob.lambda_max_bound();
    let lo = prob.eigenvalue(1.min(prob.dim()), 1e-8)?.max(hi * 1e-9) * 0.5;
    let curve = CountingCurve::sample(&prob, &log_grid(lo, hi, 60))?;
    let out = Counting {
        vertices: g.num_vertices,
        points: curve.points,
        slope: fit.slope,
        fit: [fit.lambda_lo, fit.lambda_hi],
    };
    Ok(serde_json::to_string(&out).unwrap())
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn gasket(p: f64, v: u32, depth: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(gasket_json(p, v, depth, seed))
}

#[wasm_bindgen]
pub fn dimensions(p: f64, v: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(dimensions_json(p, v, seed))
}

#[wasm_bindgen]
pub fn counting(
    p: f64,
    v: u32,
    depth: u32,
    seed: u32,
    bc: &str,
    weights: &str,
) -> std::result::Result<String, JsError> {
    js(counting_json(p, v, depth, seed, bc, weights))
}
