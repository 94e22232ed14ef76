//! On-diagonal heat kernels from dense spectral expansions, and the local
//! spectral exponent of a weight measure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{cut_graph, PrefractalGraph};
use crate::ifs::{validate_family, FamilySpec};
use crate::measures::{cut_set, dp_step, WeightSystem};
use crate::rng::substream;
use crate::spectral::{envelope_fit, phi, BoundaryCondition, DecadeStat, EigenProblem, DENSE_CAP};
use crate::vtree::VTree;

/// `p_t(x,x) = Σ_i e^{-λ_i t} φ_i(x)²` with mass-orthonormal `φ_i`.
#[derive(Debug, Clone)]
pub struct HeatKernel {
    pub bc: BoundaryCondition,
    pub eigenvalues: Vec<f64>,
    /// `φ_i(x)²`, one row per unknown.
    squares: Vec<f64>,
    unknown_of: Vec<Option<usize>>,
    mass: Vec<f64>,
}

impl HeatKernel {
    pub fn new(g: &PrefractalGraph, bc: BoundaryCondition) -> Result<Self> {
        let p = EigenProblem::new(g, bc)?;
        if p.dim() > DENSE_CAP {
            return Err(Error::SizeCap(format!(
                "heat kernel needs a dense decomposition of {} unknowns (cap {DENSE_CAP}); use a coarser depth",
                p.dim()
            )));
        }
        let (vals, vecs) = p.dense_decomposition()?;
        let n = p.dim();
        let mut squares = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                squares[r * n + c] = vecs[(r, c)].powi(2);
            }
        }
        let mut unknown_of = vec![None; g.num_vertices];
        for (i, &v) in p.vertices.iter().enumerate() {
            unknown_of[v] = Some(i);
        }
        Ok(Self { bc, eigenvalues: vals, squares, unknown_of, mass: g.mass.clone() })
    }

    fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    fn decay(&self, t: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (-l.max(0.0) * t).exp()).collect()
    }

    /// `p_t(x,x)`; zero at Dirichlet boundary vertices.
    pub fn diag(&self, x: usize, t: f64) -> Result<f64> {
        if x >= self.unknown_of.len() {
            return Err(Error::Parameter(format!("vertex {x} out of range")));
        }
        if !(t >= 0.0) {
            return Err(Error::Domain("t must be nonnegative".into()));
        }
        let Some(i) = self.unknown_of[x] else { return Ok(0.0) };
        let n = self.n();
        Ok(self.decay(t).iter().zip(&self.squares[i * n..(i + 1) * n]).map(|(e, s)| e * s).sum())
    }

    /// `p_t(x,x)` at every graph vertex.
    pub fn diag_all(&self, t: f64) -> Vec<f64> {
        let e = self.decay(t);
        let n = self.n();
        self.unknown_of
            .iter()
            .map(|u| match u {
                None => 0.0,
                Some(i) => e.iter().zip(&self.squares[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum(),
            })
            .collect()
    }

    /// `Σ_i e^{-λ_i t}`.
    pub fn trace(&self, t: f64) -> f64 {
        self.decay(t).iter().sum()
    }

    /// `Σ_x m(x) p_t(x,x)`.
    pub fn mass_trace(&self, t: f64) -> f64 {
        self.diag_all(t).iter().zip(&self.mass).map(|(p, m)| p * m).sum()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// One-shot `p_t(x,x)`.
pub fn diag_heat(g: &PrefractalGraph, x: usize, t: f64, bc: BoundaryCondition) -> Result<f64> {
    HeatKernel::new(g, bc)?.diag(x, t)
}

/// Kendall's τ_b and the one-sided p-value for a positive trend.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    fn tau(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len();
        let (mut s, mut tx, mut ty, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let a = (xs[i] - xs[j]).signum() * ((xs[i] != xs[j]) as i32 as f64);
                let b = (ys[i] - ys[j]).signum() * ((ys[i] != ys[j]) as i32 as f64);
                s += a * b;
                tx += (a == 0.0) as i32 as f64;
                ty += (b == 0.0) as i32 as f64;
                pairs += 1.0;
            }
        }
        let denom = ((pairs - tx) * (pairs - ty)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            s / denom
        }
    }
    let n = xs.len();
    if n < 2 {
        return (0.0, 1.0);
    }
    let t0 = tau(xs, ys);
    if n <= 8 {
        // exact permutation distribution
        let mut perm: Vec<usize> = (0..n).collect();
        let mut ge = 0usize;
        let mut total = 0usize;
        let mut c = vec![0usize; n];
        let mut eval = |perm: &[usize]| {
            let yp: Vec<f64> = perm.iter().map(|&i| ys[i]).collect();
            total += 1;
            if tau(xs, &yp) >= t0 - 1e-12 {
                ge += 1;
            }
        };
        eval(&perm);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                eval(&perm);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        (t0, ge as f64 / total as f64)
    } else {
        let nf = n as f64;
        let sd = (2.0 * (2.0 * nf + 5.0) / (9.0 * nf * (nf - 1.0))).sqrt();
        (t0, 0.5 * erfc(t0 / sd / std::f64::consts::SQRT_2))
    }
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes erfcc, |error| < 1.2e-7
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HkRow {
    pub k: usize,
    pub m_k: usize,
    /// `max p_{t_i}(x,x) μ_i` over members and their vertices.
    pub max_value: f64,
    pub argmax_member: Vec<usize>,
    pub argmax_vertex: usize,
    pub argmax_is_boundary: bool,
    /// `min p_{2 t_i}(x,x) μ_i`.
    pub lower_min: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HkUpperReport {
    pub rows: Vec<HkRow>,
    pub c: f64,
    /// Largest over smallest row maximum.
    pub spread: f64,
    pub kendall_tau: f64,
    pub trend_p_value: f64,
    pub passed: bool,
}

impl HkUpperReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m_k,max_p_mu,argmax_vertex,argmax_is_boundary,lower_min\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.12e},{},{},{:.12e}",
                r.k, r.m_k, r.max_value, r.argmax_vertex, r.argmax_is_boundary as u8, r.lower_min
            );
        }
        out
    }
}

/// Evaluates `p_{t_i}(x,x) μ_i` over every member `i` of `Λ_k` and every
/// vertex of `K_i`, on one Neumann graph: the glued cut graph of the finest
/// cut subdivided `sub_depth` more levels.
pub fn hk_upper_audit(
    tree: &mut VTree,
    weights: &WeightSystem,
    k_range: std::ops::RangeInclusive<usize>,
    sub_depth: usize,
) -> Result<HkUpperReport> {
    let kmax = *k_range.end();
    let cg = cut_graph(tree, weights, kmax, sub_depth)?;
    let g = &cg.glued;
    let hk = HeatKernel::new(g, BoundaryCondition::Neumann)?;
    let mut rows = Vec::new();
    for k in k_range {
        let cut = cut_set(tree, weights, k)?;
        let index: HashMap<&[usize], usize> =
            cut.members.iter().enumerate().map(|(i, m)| (m.address.as_slice(), i)).collect();
        let mut lens: Vec<usize> = cut.members.iter().map(|m| m.address.len()).collect();
        lens.sort_unstable();
        lens.dedup();
        let mut verts: Vec<Vec<usize>> = vec![Vec::new(); cut.m_k];
        for cell in &g.cells {
            let owner = lens.iter().filter(|&&l| l <= cell.address.len()).find_map(|&l| index.get(&cell.address[..l]));
            match owner {
                Some(&i) => verts[i].extend(cell.corners.iter().copied()),
                None => {
                    return Err(Error::Precondition(format!(
                        "graph cell {:?} lies in no member of Λ_{k}",
                        cell.address
                    )))
                }
            }
        }
        let mut by_t: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, m) in cut.members.iter().enumerate() {
            by_t.entry(m.log_t.to_bits()).or_default().push(i);
        }
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        let mut lower_min = f64::INFINITY;
        for (bits, members) in by_t {
            let t = f64::from_bits(bits).exp();
            let p1 = hk.diag_all(t);
            let p2 = hk.diag_all(2.0 * t);
            for i in members {
                let mu = cut.members[i].log_mu.exp();
                for &x in &verts[i] {
                    let v = p1[x] * mu;
                    if v > best.0 {
                        best = (v, i, x);
                    }
                    lower_min = lower_min.min(p2[x] * mu);
                }
            }
        }
        rows.push(HkRow {
            k,
            m_k: cut.m_k,
            max_value: best.0,
            argmax_member: cut.members[best.1].address.clone(),
            argmax_vertex: best.2,
            argmax_is_boundary: g.is_boundary[best.2],
            lower_min,
        });
    }
    let maxima: Vec<f64> = rows.iter().map(|r| r.max_value).collect();
    let c = maxima.iter().cloned().fold(0.0, f64::max);
    let lo = maxima.iter().cloned().fold(f64::INFINITY, f64::min);
    let ks: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let (kendall_tau, trend_p_value) = kendall_tau(&ks, &maxima);
    let spread = c / lo;
    Ok(HkUpperReport {
        rows,
        c,
        spread,
        kendall_tau,
        trend_p_value,
        passed: c.is_finite() && spread < 2.0 && trend_p_value >= 0.05,
    })
}

/// Monte Carlo sizes for [`local_exponent`].
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalExponentParams {
    /// Neck segments per replica for the formula ratio.
    pub segments: usize,
    pub replicas: usize,
    /// Paths for the path estimator.
    pub paths: usize,
    /// Neck segments walked by each path.
    pub path_segments: usize,
    pub seed: u64,
}

impl Default for LocalExponentParams {
    fn default() -> Self {
        Self { segments: 200, replicas: 64, paths: 400, path_segments: 400, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalExponentEstimate {
    pub reference: WeightSystem,
    pub sampling: WeightSystem,
    /// `E Σ ĥμ_i log μ_i` per segment.
    pub numerator: f64,
    /// `E Σ ĥμ_i log t_i` per segment.
    pub denominator: f64,
    pub formula: RatioEstimate,
    pub path: RatioEstimate,
    pub difference: f64,
    pub combined_se: f64,
    pub agree: bool,
}

impl LocalExponentEstimate {
    /// Inverse-variance combination of both estimators.
    pub fn pooled(&self) -> RatioEstimate {
        let (a, b) = (&self.formula, &self.path);
        if a.se == 0.0 || b.se == 0.0 {
            return if a.se <= b.se { a.clone() } else { b.clone() };
        }
        let (wa, wb) = (a.se.powi(-2), b.se.powi(-2));
        RatioEstimate { ratio: (wa * a.ratio + wb * b.ratio) / (wa + wb), se: (wa + wb).powf(-0.5) }
    }
}

struct SegmentTables {
    ref_w: Vec<Vec<f64>>,
    log_ref: Vec<Vec<f64>>,
    samp_w: Vec<Vec<f64>>,
    log_r: Vec<Vec<f64>>,
}

/// Sums over one neck segment `(a, b]` from the single type at neck `a`:
/// returns `(E_ĥ log w, E_ĥ log r, log Σ w)` over the cells at level `b`.
fn segment_sums(tree: &VTree, tab: &SegmentTables, a: usize, b: usize, start: usize) -> (f64, f64, f64) {
    let v = tree.v();
    let mut s = vec![0.0; v];
    let mut aw = vec![0.0; v];
    let mut ar = vec![0.0; v];
    let mut w = vec![0.0; v];
    s[start] = 1.0;
    w[start] = 1.0;
    let mut log_z = 0.0;
    let mut scratch = vec![0.0; v];
    for stage in a + 1..=b {
        let env = tree.env(stage);
        let mut s2 = vec![0.0; v];
        let mut aw2 = vec![0.0; v];
        let mut ar2 = vec![0.0; v];
        for (t, entry) in env.entries.iter().enumerate() {
            if s[t] == 0.0 {
                continue;
            }
            let f = entry.ifs;
            for (i, &u) in entry.child_types.iter().enumerate() {
                let u = u as usize;
                let h = tab.samp_w[f][i];
                s2[u] += h * s[t];
                aw2[u] += h * (aw[t] + tab.log_ref[f][i] * s[t]);
                ar2[u] += h * (ar[t] + tab.log_r[f][i] * s[t]);
            }
        }
        let scale = s2.iter().cloned().fold(0.0, f64::max);
        s = s2.iter().map(|x| x / scale).collect();
        aw = aw2.iter().map(|x| x / scale).collect();
        ar = ar2.iter().map(|x| x / scale).collect();
        log_z += dp_step(env, &tab.ref_w, &mut w, &mut scratch);
    }
    let total: f64 = s.iter().sum();
    (aw.iter().sum::<f64>() / total, ar.iter().sum::<f64>() / total, log_z + w.iter().sum::<f64>().ln())
}

/// Backward sums `b_s[u]` of the sampling weights from level `s` to neck `b`.
fn backward_tables(tree: &VTree, samp_w: &[Vec<f64>], a: usize, b: usize) -> Vec<Vec<f64>> {
    let v = tree.v();
    let mut out = vec![vec![1.0; v]; b - a + 1];
    for s in (a..b).rev() {
        let env = tree.env(s + 1);
        let next = out[s + 1 - a].clone();
        let mut cur = vec![0.0; v];
        for (t, entry) in env.entries.iter().enumerate() {
            cur[t] = entry.child_types.iter().enumerate().map(|(i, &u)| samp_w[entry.ifs][i] * next[u as usize]).sum();
        }
        let m = cur.iter().cloned().fold(0.0, f64::max);
        out[s - a] = cur.iter().map(|x| x / m).collect();
    }
    out
}

fn neck_type(tree: &VTree, level: usize) -> usize {
    if level == 0 {
        tree.root_type()
    } else {
        tree.env(level).entries[0].child_types[0] as usize
    }
}

/// Local spectral exponent `E Σ ĥμ_i log μ_i / E Σ ĥμ_i log t_i` by the
/// segment-mean ratio and by sampling `ĥμ`-typical paths.
pub fn local_exponent(
    family: Arc<FamilySpec>,
    v: usize,
    reference: &WeightSystem,
    sampling: &WeightSystem,
    params: LocalExponentParams,
) -> Result<LocalExponentEstimate> {
    validate_family(&family, Some(reference))?;
    validate_family(&family, Some(sampling))?;
    if params.replicas < 2 || params.segments < 1 || params.paths < 2 || params.path_segments < 1 {
        return Err(Error::Parameter("local exponent needs ≥ 2 replicas and paths, ≥ 1 segment".into()));
    }
    let ref_w = reference.resolve(&family)?;
    let samp_w = sampling.resolve(&family)?;
    let tab = SegmentTables {
        log_ref: ref_w.iter().map(|w| w.iter().map(|x| x.ln()).collect()).collect(),
        ref_w,
        samp_w,
        log_r: family.members().iter().map(|m| m.r().iter().map(|x| x.ln()).collect()).collect(),
    };
    // formula ratio
    let reps: Vec<u64> = (0..params.replicas as u64).collect();
    let per_rep: Vec<Result<(f64, f64)>> = crate::par_map(&reps, |&r| {
        let mut tree = VTree::with_replica(family.clone(), v, params.seed, r)?;
        let necks = tree.neck_levels(params.segments)?;
        let (mut num, mut den) = (0.0, 0.0);
        let mut prev = 0;
        for &n in &necks {
            let (elw, elr, lz) = segment_sums(&tree, &tab, prev, n, neck_type(&tree, prev));
            num += elw - lz;
            den += elw - lz + elr;
            prev = n;
        }
        Ok((num / necks.len() as f64, den / necks.len() as f64))
    });
    let per_rep: Vec<(f64, f64)> = per_rep.into_iter().collect::<Result<_>>()?;
    let rn = per_rep.len() as f64;
    let numerator = per_rep.iter().map(|p| p.0).sum::<f64>() / rn;
    let denominator = per_rep.iter().map(|p| p.1).sum::<f64>() / rn;
    let ratio = numerator / denominator;
    let resid: Vec<f64> = per_rep.iter().map(|p| p.0 - ratio * p.1).collect();
    let var = resid.iter().map(|x| x * x).sum::<f64>() / (rn - 1.0);
    let formula = RatioEstimate { ratio, se: (var / rn).sqrt() / denominator.abs() };
    // path estimator
    let paths: Vec<u64> = (0..params.paths as u64).collect();
    let per_path: Vec<Result<f64>> = crate::par_map(&paths, |&p| {
        let mut tree = VTree::with_replica(family.clone(), v, params.seed.wrapping_add(1), p)?;
        let necks = tree.neck_levels(params.path_segments)?;
        let mut rng = substream(params.seed, p, u64::MAX - 1);
        let (mut log_mu, mut log_r) = (0.0, 0.0);
        let mut prev = 0;
        for &n in &necks {
            let back = backward_tables(&tree, &tab.samp_w, prev, n);
            let (_, _, lz) = segment_sums(&tree, &tab, prev, n, neck_type(&tree, prev));
            let mut ty = neck_type(&tree, prev);
            let mut lw = 0.0;
            for s in prev..n {
                let entry = &tree.env(s + 1).entries[ty];
                let f = entry.ifs;
                let probs: Vec<f64> = entry
                    .child_types
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| tab.samp_w[f][i] * back[s + 1 - prev][u as usize])
                    .collect();
                let mut pick = rng.gen::<f64>() * probs.iter().sum::<f64>();
                let mut chosen = probs.len() - 1;
                for (i, q) in probs.iter().enumerate() {
                    if pick < *q {
                        chosen = i;
                        break;
                    }
                    pick -= q;
                }
                lw += tab.log_ref[f][chosen];
                log_r += tab.log_r[f][chosen];
                ty = entry.child_types[chosen] as usize;
            }
            log_mu += lw - lz;
            prev = n;
        }
        Ok(log_mu / (log_mu + log_r))
    });
    let per_path: Vec<f64> = per_path.into_iter().collect::<Result<_>>()?;
    let pn = per_path.len() as f64;
    let pm = per_path.iter().sum::<f64>() / pn;
    let pv = per_path.iter().map(|x| (x - pm).powi(2)).sum::<f64>() / (pn - 1.0);
    let path = RatioEstimate { ratio: pm, se: (pv / pn).sqrt() };
    let combined_se = (formula.se.powi(2) + path.se.powi(2)).sqrt();
    let difference = formula.ratio - path.ratio;
    Ok(LocalExponentEstimate {
        reference: reference.clone(),
        sampling: sampling.clone(),
        numerator,
        denominator,
        agree: difference.abs() <= 3.0 * combined_se.max(1e-12),
        formula,
        path,
        difference,
        combined_se,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatPoint {
    pub t: f64,
    pub p: f64,
    pub normalized: f64,
    pub phi: f64,
    /// Below the crossing time of the finest cells at `x`.
    pub discretization_limited: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatProfile {
    pub x: usize,
    pub exponent: f64,
    pub points: Vec<HeatPoint>,
    pub decades: Vec<DecadeStat>,
    pub spread: f64,
    pub envelope_exponent: f64,
    pub inside_envelope: bool,
}

impl HeatProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,p,normalized,phi\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.12e},{:.12e},{:.12e},{:.12e}", p.t, p.p, p.normalized, p.phi);
        }
        out
    }
}

/// `p_t(x,x) t^{d_s/2}` against `φ(1/t)` for `t <= 1/16`; points below the
/// finest crossing time around `x` are flagged and left out of the fit.
pub fn heat_profile(g: &PrefractalGraph, hk: &HeatKernel, x: usize, ds: f64, ts: &[f64]) -> Result<HeatProfile> {
    let floor =
        g.cells.iter().filter(|c| c.corners.contains(&x)).map(|c| (c.log_mu - c.log_rho).exp()).fold(0.0, f64::max);
    let mut points = Vec::new();
    for &t in ts.iter().filter(|&&t| t > 0.0 && t <= 1.0 / 16.0) {
        let p = hk.diag(x, t)?;
        points.push(HeatPoint {
            t,
            p,
            normalized: p * t.powf(ds / 2.0),
            phi: phi(1.0 / t).unwrap(),
            discretization_limited: t < floor,
        });
    }
    let fit: Vec<(f64, f64, f64)> =
        points.iter().filter(|p| !p.discretization_limited).map(|p| (1.0 / p.t, p.normalized, p.phi)).collect();
    let (decades, spread, envelope_exponent, inside_envelope) = envelope_fit(&fit, ds);
    Ok(HeatProfile { x, exponent: ds, points, decades, spread, envelope_exponent, inside_envelope })
}

/// Flat-measure heat profile at vertex `x` of `G_depth`.
pub fn flat_fluctuation_profile(
    tree: &mut VTree,
    depth: usize,
    resistance_dim: f64,
    x: usize,
    ts: &[f64],
) -> Result<HeatProfile> {
    let g = crate::graph::build_graph(tree, depth, &WeightSystem::flat(resistance_dim))?;
    let hk = HeatKernel::new(&g, BoundaryCondition::Neumann)?;
    let ds = 2.0 * resistance_dim / (resistance_dim + 1.0);
    heat_profile(&g, &hk, x, ds, ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::ifs::{make_interpolating, make_sg, Rational};
    use crate::pressure::{solve_dimension, McParams, PressureKind};
    use crate::spectral::log_grid;

    fn sg(level: u32) -> Arc<FamilySpec> {
        Arc::new(FamilySpec::single(make_sg(level).unwrap()))
    }
    fn mixed() -> Arc<FamilySpec> {
        Arc::new(FamilySpec::new(vec![(make_sg(2).unwrap(), 0.5), (make_sg(3).unwrap(), 0.5)]).unwrap())
    }

    #[test]
    fn endpoints_and_trace() {
        let mut t = VTree::new(mixed(), 1, 3).unwrap();
        let g = build_graph(&mut t, 3, &WeightSystem::Unit).unwrap();
        let n = HeatKernel::new(&g, BoundaryCondition::Neumann).unwrap();
        let small = 1e-12 / n.lambda_max();
        let large = 60.0 / n.eigenvalues[1];
        for x in (0..g.num_vertices).step_by(5) {
            assert!((n.diag(x, small).unwrap() * g.mass[x] - 1.0).abs() < 1e-8);
            assert!((n.diag(x, large).unwrap() - 1.0).abs() < 1e-8);
        }
        for t in log_grid(1e-4, 10.0, 20) {
            assert!((n.mass_trace(t) - n.trace(t)).abs() < 1e-10 * n.trace(t).max(1.0));
        }
        let d = HeatKernel::new(&g, BoundaryCondition::Dirichlet).unwrap();
        assert_eq!(d.diag(g.boundary()[0], 0.1).unwrap(), 0.0);
        let x = g.interior()[0];
        let ps: Vec<f64> = log_grid(1e-4, 1.0, 30).iter().map(|&t| d.diag(x, t).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn kendall_exact_small() {
        let (t, p) = kendall_tau(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((t - 1.0).abs() < 1e-12);
        assert!((p - 1.0 / 120.0).abs() < 1e-12);
        let (t, p) = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]);
        assert!((t + 1.0).abs() < 1e-12 && (p - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (_, p) = kendall_tau(&xs, &xs);
        assert!(p < 1e-6);
        assert!((erfc(0.0) - 1.0).abs() < 1e-7 && (erfc(1.0) - 0.157299).abs() < 1e-6);
    }

    #[test]
    fn sg2_heat_upper_bound_is_stable() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let r = hk_upper_audit(&mut t, &WeightSystem::Unit, 2..=4, 2).unwrap();
        assert!(r.spread < 2.0, "{:?}", r.rows);
        assert!(r.rows.iter().all(|row| row.lower_min > 0.0));
    }

    #[test]
    fn single_ifs_local_exponent() {
        let params = LocalExponentParams { segments: 20, replicas: 4, paths: 20, path_segments: 30, seed: 1 };
        let e = local_exponent(sg(2), 1, &WeightSystem::Unit, &WeightSystem::Conductance, params).unwrap();
        let want = 3f64.ln() / 5f64.ln();
        assert!((e.formula.ratio - want).abs() < 1e-12);
        assert!((e.path.ratio - want).abs() < 1e-12);
    }

    #[test]
    fn segment_sums_match_enumeration() {
        // V = 2 with one forced neck: brute force over all cells of the segment
        let fam = mixed();
        let mut tree = VTree::new(fam.clone(), 2, 5).unwrap().with_forced_necks([3]);
        tree.realize(3).unwrap();
        let refw = WeightSystem::Custom(vec![vec![1.0, 2.0, 3.0], vec![1.0, 1.5, 2.0, 0.5, 1.0, 3.0]]);
        let samp = WeightSystem::Conductance;
        let rw = refw.resolve(&fam).unwrap();
        let sw = samp.resolve(&fam).unwrap();
        let tab = SegmentTables {
            log_ref: rw.iter().map(|w| w.iter().map(|x| x.ln()).collect()).collect(),
            ref_w: rw.clone(),
            samp_w: sw.clone(),
            log_r: fam.members().iter().map(|m| m.r().iter().map(|x| x.ln()).collect()).collect(),
        };
        let (elw, elr, lz) = segment_sums(&tree, &tab, 0, 3, tree.root_type());
        let cells = tree.nodes_at(3).unwrap();
        let (mut sh, mut shw, mut shr, mut z) = (0.0, 0.0, 0.0, 0.0);
        for (addr, _) in &cells {
            let (mut w, mut h, mut r) = (1.0, 1.0, 1.0);
            for j in 0..addr.len() {
                let f = tree.ifs_at(&addr[..j]).unwrap();
                w *= rw[f][addr[j]];
                h *= sw[f][addr[j]];
                r *= fam.members()[f].r()[addr[j]];
            }
            sh += h;
            shw += h * w.ln();
            shr += h * r.ln();
            z += w;
        }
        assert!((elw - shw / sh).abs() < 1e-12);
        assert!((elr - shr / sh).abs() < 1e-12);
        assert!((lz - z.ln()).abs() < 1e-12);
    }

    #[test]
    fn flat_reference_gives_half_spectral_dimension() {
        let mc = McParams { segments: 200, replicas: 32, seed: 3 };
        let dr = solve_dimension(&PressureKind::Resistance, mixed(), 1, mc, 1e-10).unwrap().root;
        let params = LocalExponentParams { segments: 200, replicas: 16, paths: 200, path_segments: 300, seed: 4 };
        let flat = WeightSystem::flat(dr);
        let f = local_exponent(mixed(), 1, &flat, &flat, params).unwrap();
        assert!(f.agree, "{f:?}");
        assert!((f.pooled().ratio - dr / (dr + 1.0)).abs() < 0.01);
    }

    #[test]
    fn unit_and_flat_references_differ() {
        // every SG map has the same resistance ratio, so UNIT is flat there;
        // the interpolating maps are not
        let fam = Arc::new(
            FamilySpec::new(vec![
                (make_interpolating(Rational::new(2, 5)).unwrap(), 0.5),
                (make_interpolating(Rational::new(3, 8)).unwrap(), 0.5),
            ])
            .unwrap(),
        );
        let mc = McParams { segments: 200, replicas: 32, seed: 3 };
        let dr = solve_dimension(&PressureKind::Resistance, fam.clone(), 1, mc, 1e-10).unwrap().root;
        let params = LocalExponentParams { segments: 200, replicas: 16, paths: 200, path_segments: 300, seed: 4 };
        let flat = WeightSystem::flat(dr);
        let f = local_exponent(fam.clone(), 1, &flat, &flat, params).unwrap();
        let u = local_exponent(fam, 1, &WeightSystem::Unit, &WeightSystem::Unit, params).unwrap();
        assert!(f.agree && u.agree, "{f:?} {u:?}");
        let (a, b) = (f.pooled(), u.pooled());
        assert!((a.ratio - b.ratio).abs() > 3.0 * (a.se.powi(2) + b.se.powi(2)).sqrt(), "{a:?} {b:?}");
    }

    #[test]
    fn sg2_flat_heat_profile_is_bounded() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let dr = 3f64.ln() / (5.0f64 / 3.0).ln();
        let prof = flat_fluctuation_profile(&mut t, 5, dr, 7, &log_grid(1e-5, 1.0 / 16.0, 60)).unwrap();
        assert!(prof.points.iter().any(|p| p.discretization_limited));
        assert!(prof.spread < 3.0);
        assert!(prof.envelope_exponent < 0.5);
    }
}
