//! Monte Carlo pressure functions and their zeros.
//!
//! Each replica is one V-variable tree cut into consecutive neck segments.
//! The segments are stored once and reused for every exponent, so the
//! sample pressure `γ̂` is a deterministic, strictly decreasing function and
//! can be bisected to machine resolution. The statistical error of the root
//! comes from the spread of the per-replica means, divided by the slope.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifs::{validate_family, FamilySpec};
use crate::measures::{dp_step, Factors, WeightSystem};
use crate::par_map;
use crate::rng::substream;
use crate::vtree::{neck_probability, sample_environment, VTree};

/// Which pressure function to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "weights", rename_all = "snake_case")]
pub enum PressureKind {
    /// Factors `ℓ_i^α`.
    Hausdorff,
    /// Factors `r_i^α`.
    Resistance,
    /// Crossing times `t_i^{β/2}` for the given weights.
    Spectral(WeightSystem),
}

impl PressureKind {
    pub fn name(&self) -> &'static str {
        match self {
            PressureKind::Hausdorff => "hausdorff",
            PressureKind::Resistance => "resistance",
            PressureKind::Spectral(_) => "spectral",
        }
    }
}

/// Monte Carlo sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McParams {
    pub segments: usize,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for McParams {
    fn default() -> Self {
        Self { segments: 200, replicas: 64, seed: 0 }
    }
}

impl McParams {
    fn check(&self) -> Result<()> {
        if self.segments < 1 || self.replicas < 1 {
            return Err(Error::Parameter("need at least one segment and one replica".into()));
        }
        Ok(())
    }
}

/// Statistical root tolerance.
pub const STAT_TOL: f64 = 1e-3;
/// Root tolerance on the closed-form path.
pub const EXACT_TOL: f64 = 1e-10;
/// Upper bound on stored `(stage, type)` records across all replicas.
pub const SAMPLE_CAP: usize = 200_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct PressureEstimate {
    pub kind: PressureKind,
    pub exponent: f64,
    pub v: usize,
    pub family: Vec<String>,
    pub mc: McParams,
    pub value: f64,
    pub std_error: f64,
    pub replica_values: Vec<f64>,
    pub mean_neck_gap: f64,
    /// True when the single-IFS closed form was used.
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DimensionResult {
    pub kind: PressureKind,
    pub root: f64,
    pub bracket: [f64; 2],
    pub ci: [f64; 2],
    /// Standard error of the root.
    pub se: f64,
    /// `dγ̂/dx` at the root.
    pub slope: f64,
    /// `3·SE > tol`: the bracket was narrowed below what the sample resolves.
    pub resolution_limited: bool,
    pub mean_neck_gap: f64,
    pub exact: bool,
    pub derived: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
struct ReplicaSegments {
    start_types: Vec<u16>,
    seg_len: Vec<u32>,
    /// IFS index per `(stage, type)`.
    ifs: Vec<u16>,
    /// Child types, concatenated in `(stage, type, map)` order.
    children: Vec<u16>,
}

/// Stored neck segments shared by every evaluation of `γ̂`.
#[derive(Debug, Clone)]
pub struct PressureSamples {
    family: Arc<FamilySpec>,
    v: usize,
    mc: McParams,
    replicas: Vec<ReplicaSegments>,
    mean_gap: f64,
}

/// Per-map factors for one exponent.
#[derive(Debug, Clone)]
struct Evaluator {
    main: Factors,
    /// Weights and coefficient for the spectral split.
    split: Option<(Factors, f64)>,
}

fn normalized_weights(family: &FamilySpec, ws: &WeightSystem) -> Result<Factors> {
    let w =
        ws.resolve(family).map_err(|e| Error::Precondition(format!("spectral pressure needs valid weights: {e}")))?;
    // dividing by the maximum keeps the estimator invariant under w -> c·w
    let m = w.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(w.into_iter().map(|v| v.into_iter().map(|x| x / m).collect()).collect())
}

impl Evaluator {
    fn new(family: &FamilySpec, kind: &PressureKind, x: f64) -> Result<Self> {
        let pow = |f: &dyn Fn(&crate::ifs::IfsSpec) -> &[f64]| -> Factors {
            family.members().iter().map(|m| f(m).iter().map(|s| s.powf(x)).collect()).collect()
        };
        Ok(match kind {
            PressureKind::Hausdorff => Evaluator { main: pow(&|m| m.ell()), split: None },
            PressureKind::Resistance => Evaluator { main: pow(&|m| m.r()), split: None },
            PressureKind::Spectral(ws) => {
                let w = normalized_weights(family, ws)?;
                let main = family
                    .members()
                    .iter()
                    .zip(&w)
                    .map(|(m, w)| m.r().iter().zip(w).map(|(r, w)| (r * w).powf(x / 2.0)).collect())
                    .collect();
                Evaluator { main, split: Some((w, x / 2.0)) }
            }
        })
    }

    /// Per-level value for a single-IFS family (member 0).
    fn single_level(&self) -> f64 {
        let main: f64 = self.main[0].iter().sum::<f64>().ln();
        match &self.split {
            None => main,
            Some((w, c)) => main - c * w[0].iter().sum::<f64>().ln(),
        }
    }
}

fn segment_dp(
    family: &FamilySpec,
    v: usize,
    rep: &ReplicaSegments,
    factors: &Factors,
    mut visit: impl FnMut(usize, f64),
) {
    let mut w = vec![0.0; v];
    let mut scratch = Vec::with_capacity(v);
    let mut stage = 0usize;
    let mut cursor = 0usize;
    for (j, (&start, &len)) in rep.start_types.iter().zip(&rep.seg_len).enumerate() {
        w.iter_mut().for_each(|x| *x = 0.0);
        w[start as usize] = 1.0;
        let mut acc = 0.0;
        for _ in 0..len {
            scratch.clear();
            scratch.resize(v, 0.0);
            for t in 0..v {
                let f = rep.ifs[stage * v + t] as usize;
                let n = family.members()[f].num_maps();
                let wt = w[t];
                if wt != 0.0 {
                    let s = &factors[f];
                    for i in 0..n {
                        scratch[rep.children[cursor + i] as usize] += wt * s[i];
                    }
                }
                cursor += n;
            }
            let total: f64 = scratch.iter().sum();
            for x in scratch.iter_mut() {
                *x /= total;
            }
            std::mem::swap(&mut w, &mut scratch);
            acc += total.ln();
            stage += 1;
        }
        visit(j, acc);
    }
}

impl PressureSamples {
    /// Samples `mc.replicas` trees with `mc.segments` neck segments each.
    /// Replica `r` is the tree `VTree::with_replica(family, v, seed, r)`.
    pub fn generate(family: Arc<FamilySpec>, v: usize, mc: McParams) -> Result<Self> {
        mc.check()?;
        validate_family(&family, None)?;
        if v < 1 || v > u16::MAX as usize {
            return Err(Error::Parameter(format!("V = {v} must lie in 1..=65535")));
        }
        let budget_per_replica = SAMPLE_CAP / mc.replicas;
        let indices: Vec<u64> = (0..mc.replicas as u64).collect();
        let reps = par_map(&indices, |&r| -> Result<ReplicaSegments> {
            let mut rep = ReplicaSegments::default();
            let mut start = substream(mc.seed, r, 0).gen_range(0..v) as u16;
            let mut level = 0u64;
            for _ in 0..mc.segments {
                rep.start_types.push(start);
                let mut len = 0u32;
                loop {
                    level += 1;
                    len += 1;
                    let env = sample_environment(&family, v, &mut substream(mc.seed, r, level))?;
                    for e in &env.entries {
                        rep.ifs.push(e.ifs as u16);
                        rep.children.extend_from_slice(&e.child_types);
                    }
                    if rep.ifs.len() > budget_per_replica {
                        return Err(Error::SizeCap(format!(
                            "pressure samples exceed {SAMPLE_CAP} records; reduce segments or replicas"
                        )));
                    }
                    if env.is_neck() {
                        start = env.entries[0].child_types[0];
                        break;
                    }
                }
                rep.seg_len.push(len);
            }
            Ok(rep)
        });
        let replicas = reps.into_iter().collect::<Result<Vec<_>>>()?;
        let total: u64 = replicas.iter().flat_map(|r| r.seg_len.iter()).map(|&l| l as u64).sum();
        let mean_gap = total as f64 / (mc.segments * mc.replicas) as f64;
        Ok(Self { family, v, mc, replicas, mean_gap })
    }

    pub fn mean_neck_gap(&self) -> f64 {
        self.mean_gap
    }

    pub fn mc(&self) -> McParams {
        self.mc
    }

    /// Binds a kind to these samples, caching its exponent-free part.
    pub fn bind<'a>(&'a self, kind: &'a PressureKind) -> Result<SampleFunction<'a>> {
        let ev = Evaluator::new(&self.family, kind, 0.0)?;
        let split_logs = ev.split.map(|(w, _)| {
            par_map(&self.replicas, |rep| {
                let mut out = vec![0.0; rep.seg_len.len()];
                segment_dp(&self.family, self.v, rep, &w, |j, x| out[j] = x);
                out
            })
        });
        Ok(SampleFunction { samples: self, kind, split_logs })
    }

    /// Segment values `X_j` for every replica.
    pub fn segment_values(&self, kind: &PressureKind, x: f64) -> Result<Vec<Vec<f64>>> {
        self.bind(kind)?.segment_values(x)
    }

    /// Per-replica means `(1/K) Σ_j X_j`.
    pub fn replica_means(&self, kind: &PressureKind, x: f64) -> Result<Vec<f64>> {
        self.bind(kind)?.replica_means(x)
    }

    /// `(γ̂, SE)` at `x`.
    pub fn gamma(&self, kind: &PressureKind, x: f64) -> Result<(f64, f64)> {
        self.bind(kind)?.gamma(x)
    }
}

/// The sample pressure `x -> γ̂(x)` for one kind.
pub struct SampleFunction<'a> {
    samples: &'a PressureSamples,
    kind: &'a PressureKind,
    /// Per-segment `log Σ w` for the spectral split.
    split_logs: Option<Vec<Vec<f64>>>,
}

impl SampleFunction<'_> {
    pub fn segment_values(&self, x: f64) -> Result<Vec<Vec<f64>>> {
        let s = self.samples;
        let ev = Evaluator::new(&s.family, self.kind, x)?;
        let idx: Vec<usize> = (0..s.replicas.len()).collect();
        Ok(par_map(&idx, |&r| {
            let rep = &s.replicas[r];
            let mut out = vec![0.0; rep.seg_len.len()];
            segment_dp(&s.family, s.v, rep, &ev.main, |j, v| out[j] = v);
            if let Some(logs) = &self.split_logs {
                for (o, l) in out.iter_mut().zip(&logs[r]) {
                    *o -= x / 2.0 * l;
                }
            }
            out
        }))
    }

    pub fn replica_means(&self, x: f64) -> Result<Vec<f64>> {
        Ok(self.segment_values(x)?.into_iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect())
    }

    pub fn gamma(&self, x: f64) -> Result<(f64, f64)> {
        Ok(mean_se(&self.replica_means(x)?))
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn single_member(family: &FamilySpec) -> Option<usize> {
    if family.len() == 1 {
        Some(0)
    } else {
        family.is_degenerate()
    }
}

/// Family restricted to its only live member.
fn collapse(family: &FamilySpec, k: usize) -> FamilySpec {
    FamilySpec::single(family.members()[k].clone())
}

fn collapse_kind(family: &FamilySpec, k: usize, kind: &PressureKind) -> Result<PressureKind> {
    Ok(match kind {
        PressureKind::Spectral(ws) => {
            let w = ws.resolve(family).map_err(|e| Error::Precondition(format!("invalid weights: {e}")))?;
            PressureKind::Spectral(WeightSystem::Custom(vec![w[k].clone()]))
        }
        other => other.clone(),
    })
}

/// Sample estimate of `γ(x)` for the given kind.
pub fn estimate_gamma(
    kind: &PressureKind,
    exponent: f64,
    family: Arc<FamilySpec>,
    v: usize,
    mc: McParams,
) -> Result<PressureEstimate> {
    mc.check()?;
    validate_family(&family, None)?;
    let ids = family.members().iter().map(|m| m.id().to_string()).collect();
    if let Some(k) = single_member(&family) {
        let single = collapse(&family, k);
        let ev = Evaluator::new(&single, &collapse_kind(&family, k, kind)?, exponent)?;
        let gap = 1.0 / neck_probability(&single, v);
        let value = gap * ev.single_level();
        return Ok(PressureEstimate {
            kind: kind.clone(),
            exponent,
            v,
            family: ids,
            mc,
            value,
            std_error: 0.0,
            replica_values: vec![value; mc.replicas],
            mean_neck_gap: gap,
            exact: true,
        });
    }
    let samples = PressureSamples::generate(family, v, mc)?;
    let replica_values = samples.replica_means(kind, exponent)?;
    let (value, std_error) = mean_se(&replica_values);
    Ok(PressureEstimate {
        kind: kind.clone(),
        exponent,
        v,
        family: ids,
        mc,
        value,
        std_error,
        replica_values,
        mean_neck_gap: samples.mean_gap,
        exact: false,
    })
}

/// `X_1` for an explicit tree: the kind's log sum over its first neck segment.
pub fn first_segment_value(tree: &mut VTree, kind: &PressureKind, x: f64) -> Result<f64> {
    let n1 = tree.neck_levels(1)?[0];
    let ev = Evaluator::new(tree.family(), kind, x)?;
    let run = |tree: &VTree, f: &Factors| {
        let mut w = vec![0.0; tree.v()];
        w[tree.root_type()] = 1.0;
        let mut scratch = Vec::new();
        (1..=n1).map(|s| dp_step(tree.env(s), f, &mut w, &mut scratch)).sum::<f64>()
    };
    let mut out = run(tree, &ev.main);
    if let Some((w, c)) = &ev.split {
        out -= c * run(tree, w);
    }
    Ok(out)
}

fn slope_interval(family: &FamilySpec, kind: &PressureKind) -> Result<(f64, f64)> {
    let b = validate_family(family, None)?;
    let fold = |f: &dyn Fn(&crate::ifs::IfsSpec) -> &[f64]| {
        let xs: Vec<f64> = family
            .members()
            .iter()
            .zip(family.probabilities())
            .filter(|(_, p)| **p > 0.0)
            .flat_map(|(m, _)| f(m).to_vec())
            .collect();
        (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(0.0, f64::max))
    };
    Ok(match kind {
        PressureKind::Hausdorff => {
            let (lo, hi) = fold(&|m| m.ell());
            (lo.ln(), hi.ln())
        }
        PressureKind::Resistance => (b.r_inf.ln(), b.r_sup.ln()),
        PressureKind::Spectral(ws) => {
            let b = validate_family(family, Some(ws)).map_err(|e| Error::Precondition(e.to_string()))?;
            (0.5 * b.eta.unwrap().ln(), 0.5 * b.r_sup.ln())
        }
    })
}

/// Per-level slope bounds `[lo, hi]` (both negative) of the pressure.
pub fn per_level_slope_bounds(family: &FamilySpec, kind: &PressureKind) -> Result<(f64, f64)> {
    slope_interval(family, kind)
}

fn bisect(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Brent's method on a sign-changing bracket `f(a) > 0 > f(b)`.
fn brent(a: f64, b: f64, fa: f64, fb: f64, tol: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    let (mut c, mut fc) = (a, fa);
    let (mut d, mut e) = (b - a, b - a);
    for _ in 0..200 {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b)?;
    }
    Ok(b)
}

fn derived_for(kind: &PressureKind, root: f64) -> BTreeMap<String, f64> {
    let mut d = BTreeMap::new();
    match kind {
        PressureKind::Resistance => {
            d.insert("flat_spectral_dimension".into(), 2.0 * root / (root + 1.0));
            d.insert("flat_half_spectral_dimension".into(), root / (root + 1.0));
        }
        PressureKind::Spectral(_) => {
            d.insert("half_spectral_dimension".into(), root / 2.0);
        }
        PressureKind::Hausdorff => {}
    }
    d
}

fn solve_exact(kind: &PressureKind, family: &FamilySpec, v: usize) -> Result<DimensionResult> {
    let k = single_member(family).unwrap();
    let single = collapse(family, k);
    let kind1 = collapse_kind(family, k, kind)?;
    let (_, hi_slope) = slope_interval(&single, &kind1)?;
    let g0 = Evaluator::new(&single, &kind1, 0.0)?.single_level();
    let mut hi = g0 / -hi_slope;
    let f = |x: f64| Evaluator::new(&single, &kind1, x).map(|e| e.single_level());
    while f(hi)? > 0.0 {
        hi *= 2.0;
    }
    let root = bisect(0.0, hi, 1e-15, f)?;
    let h = 1e-6;
    let slope = (f(root + h)? - f(root - h)?) / (2.0 * h) / neck_probability(&single, v);
    Ok(DimensionResult {
        kind: kind.clone(),
        root,
        bracket: [0.0, hi],
        ci: [root, root],
        se: 0.0,
        slope,
        resolution_limited: false,
        mean_neck_gap: 1.0 / neck_probability(&single, v),
        exact: true,
        derived: derived_for(kind, root),
    })
}

/// Root of `γ̂` with its Monte Carlo confidence interval.
pub fn solve_dimension(
    kind: &PressureKind,
    family: Arc<FamilySpec>,
    v: usize,
    mc: McParams,
    tol: f64,
) -> Result<DimensionResult> {
    mc.check()?;
    if single_member(&family).is_some() {
        return solve_exact(kind, &family, v);
    }
    let samples = PressureSamples::generate(family, v, mc)?;
    solve_on_samples(kind, &samples, tol)
}

/// As [`solve_dimension`] on pre-generated samples.
pub fn solve_on_samples(kind: &PressureKind, samples: &PressureSamples, tol: f64) -> Result<DimensionResult> {
    let (_, hi_slope) = slope_interval(&samples.family, kind)?;
    let func = samples.bind(kind)?;
    let (g0, se0) = func.gamma(0.0)?;
    let gap = samples.mean_gap;
    let lo = 0.0;
    let mut hi = g0 / (-hi_slope * gap);
    let (mut ghi, mut sehi) = func.gamma(hi)?;
    let mut expansions = 0;
    while ghi >= -3.0 * sehi && expansions < 20 {
        hi *= 2.0;
        (ghi, sehi) = func.gamma(hi)?;
        expansions += 1;
    }
    if !(g0 > 3.0 * se0 && ghi < -3.0 * sehi) {
        return Err(Error::InconclusiveRoot(format!(
            "γ̂({lo}) = {g0} ± {se0}, γ̂({hi}) = {ghi} ± {sehi}: endpoints not separated at 3 SE"
        )));
    }
    let root = brent(lo, hi, g0, ghi, 1e-10_f64.min(tol), |x| func.gamma(x).map(|g| g.0))?;
    let (_, se_gamma) = func.gamma(root)?;
    let h = 1e-5 * root.abs().max(1.0);
    let slope = (func.gamma(root + h)?.0 - func.gamma(root - h)?.0) / (2.0 * h);
    let se = se_gamma / slope.abs();
    Ok(DimensionResult {
        kind: kind.clone(),
        root,
        bracket: [lo, hi],
        ci: [root - 3.0 * se, root + 3.0 * se],
        se,
        slope,
        resolution_limited: 3.0 * se > tol,
        mean_neck_gap: gap,
        exact: false,
        derived: derived_for(kind, root),
    })
}

/// Values of `γ̂` on a grid with the shape checks they must pass.
#[derive(Debug, Clone, Serialize)]
pub struct GridAudit {
    pub points: Vec<[f64; 3]>,
    /// Each step down exceeds three standard errors of the paired difference.
    pub strictly_decreasing: bool,
    /// Signs read `+,…,+,−,…,−`.
    pub single_sign_change: bool,
    /// Secant slopes lie in the per-level interval scaled by the sample gap.
    pub slopes_within_bounds: bool,
}

pub fn gamma_grid(kind: &PressureKind, samples: &PressureSamples, grid: &[f64]) -> Result<GridAudit> {
    let func = samples.bind(kind)?;
    let per: Vec<Vec<f64>> = grid.iter().map(|&x| func.replica_means(x)).collect::<Result<_>>()?;
    let points: Vec<[f64; 3]> = grid
        .iter()
        .zip(&per)
        .map(|(&x, m)| {
            let (g, s) = mean_se(m);
            [x, g, s]
        })
        .collect();
    let mut strictly_decreasing = true;
    for w in per.windows(2) {
        let diffs: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| a - b).collect();
        let (d, s) = mean_se(&diffs);
        if !(d > 3.0 * s && d > 0.0) {
            strictly_decreasing = false;
        }
    }
    let signs: Vec<bool> = points.iter().map(|p| p[1] > 0.0).collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    let single_sign_change = changes <= 1 && (changes == 0 || signs[0]);
    let (lo, hi) = slope_interval(&samples.family, kind)?;
    let g = samples.mean_gap;
    let slopes_within_bounds = points.windows(2).all(|w| {
        let s = (w[1][1] - w[0][1]) / (w[1][0] - w[0][0]);
        s >= lo * g - 1e-9 && s <= hi * g + 1e-9
    });
    Ok(GridAudit { points, strictly_decreasing, single_sign_change, slopes_within_bounds })
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatIdentityReport {
    pub resistance: DimensionResult,
    pub spectral: DimensionResult,
    /// `d_s(ν)/2`.
    pub lhs: f64,
    /// `d_f^r/(d_f^r + 1)`.
    pub rhs: f64,
    pub difference: f64,
    pub combined_se: f64,
    pub passed: bool,
}

/// Compares `d_s(ν)/2` with `d_f^r/(d_f^r+1)`. The spectral side uses the
/// seed `mc.seed + 1`, so the two sides are independent estimates.
pub fn flat_identity_check(family: Arc<FamilySpec>, v: usize, mc: McParams) -> Result<FlatIdentityReport> {
    let res = solve_dimension(&PressureKind::Resistance, family.clone(), v, mc, STAT_TOL)?;
    let alpha = res.root;
    let kind = PressureKind::Spectral(WeightSystem::flat(alpha));
    let spec_mc = McParams { seed: mc.seed.wrapping_add(1), ..mc };
    let spec = solve_dimension(&kind, family, v, spec_mc, STAT_TOL)?;
    let lhs = spec.root / 2.0;
    let rhs = alpha / (alpha + 1.0);
    let se_l = spec.se / 2.0;
    let se_r = res.se / (alpha + 1.0).powi(2);
    let combined_se = (se_l * se_l + se_r * se_r).sqrt();
    let difference = (lhs - rhs).abs();
    let passed = if res.exact && spec.exact { difference <= 1e-9 } else { difference <= 3.0 * combined_se };
    Ok(FlatIdentityReport { resistance: res, spectral: spec, lhs, rhs, difference, combined_se, passed })
}

#[derive(Debug, Clone, Serialize)]
pub struct MaximalityTrial {
    pub weights: Vec<Vec<f64>>,
    pub d_s: f64,
    pub se: f64,
    /// `d_s(μ) - d_s(ν)` with its paired standard error.
    pub gap: f64,
    pub gap_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaximalityReport {
    pub resistance_dim: f64,
    pub flat_d_s: f64,
    pub flat_se: f64,
    pub trials: Vec<MaximalityTrial>,
    /// Every trial satisfies `d_s(μ) <= d_s + 3 SE`.
    pub all_below: bool,
    /// Trials below the flat value by more than one standard error.
    pub strictly_below: usize,
    /// `d_s` for `2·r^{d_f^r}`.
    pub proportional_d_s: f64,
    pub proportional_matches: bool,
}

/// Perturbs the flat weights by `exp(ε·U)`, `U ~ Uniform(-1, 1)` per map,
/// and compares spectral exponents against the flat one on common samples.
pub fn maximality_scan(
    family: Arc<FamilySpec>,
    v: usize,
    mc: McParams,
    n_trials: usize,
    epsilon: f64,
) -> Result<MaximalityReport> {
    let single = single_member(&family).is_some();
    let res = solve_dimension(&PressureKind::Resistance, family.clone(), v, mc, STAT_TOL)?;
    let flat = WeightSystem::flat(res.root);
    let flat_w = flat.resolve(&family)?;
    let samples = if single { None } else { Some(PressureSamples::generate(family.clone(), v, mc)?) };
    let solve = |ws: WeightSystem| -> Result<DimensionResult> {
        let kind = PressureKind::Spectral(ws);
        match &samples {
            Some(s) => solve_on_samples(&kind, s, STAT_TOL),
            None => solve_exact(&kind, &family, v),
        }
    };
    let flat_res = solve(flat.clone())?;
    let flat_means = match &samples {
        Some(s) => Some(s.replica_means(&PressureKind::Spectral(flat.clone()), flat_res.root)?),
        None => None,
    };
    let mut rng = substream(mc.seed, u64::MAX, 0);
    let perturbed: Vec<Vec<Vec<f64>>> = (0..n_trials)
        .map(|_| {
            flat_w.iter().map(|w| w.iter().map(|x| x * (epsilon * rng.gen_range(-1.0..1.0)).exp()).collect()).collect()
        })
        .collect();
    let mut trials = Vec::with_capacity(n_trials);
    for w in perturbed {
        let ws = WeightSystem::Custom(w.clone());
        let r = solve(ws.clone())?;
        // paired error: both roots move with the same samples
        let (gap_se, gap) = match (&samples, &flat_means) {
            (Some(s), Some(fm)) => {
                let kind = PressureKind::Spectral(ws);
                let m = s.replica_means(&kind, flat_res.root)?;
                let diffs: Vec<f64> = m.iter().zip(fm).map(|(a, b)| a - b).collect();
                let (_, se) = mean_se(&diffs);
                (se / r.slope.abs(), r.root - flat_res.root)
            }
            _ => (0.0, r.root - flat_res.root),
        };
        trials.push(MaximalityTrial { weights: w, d_s: r.root, se: r.se, gap, gap_se });
    }
    let all_below = trials.iter().all(|t| t.d_s <= flat_res.root + 3.0 * flat_res.se.max(t.se) + 1e-12);
    let strictly_below = trials.iter().filter(|t| t.d_s < flat_res.root - flat_res.se.max(t.se)).count();
    let prop = solve(flat.scaled(&family, 2.0)?)?;
    let proportional_matches = (prop.root - flat_res.root).abs() <= (3.0 * flat_res.se).max(1e-9);
    Ok(MaximalityReport {
        resistance_dim: res.root,
        flat_d_s: flat_res.root,
        flat_se: flat_res.se,
        trials,
        all_below,
        strictly_below,
        proportional_d_s: prop.root,
        proportional_matches,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LilTrajectory {
    /// `(1/√(k log log k))·log Σ_{|i|=n(k)} s_i^α` for `k = 3..=K`.
    pub values: Vec<f64>,
    pub running_max: Vec<f64>,
}

/// Normalized log level sums at successive necks of one tree.
pub fn lil_statistic(
    kind: &PressureKind,
    alpha: f64,
    family: Arc<FamilySpec>,
    v: usize,
    count: usize,
    seed: u64,
) -> Result<LilTrajectory> {
    if count < 3 {
        return Err(Error::Parameter("need at least three necks".into()));
    }
    let mc = McParams { segments: count, replicas: 1, seed };
    let segs = if single_member(&family).is_some() {
        let est = estimate_gamma(kind, alpha, family.clone(), v, mc)?;
        vec![est.value / est.mean_neck_gap; count]
    } else {
        PressureSamples::generate(family, v, mc)?.segment_values(kind, alpha)?.remove(0)
    };
    let mut values = Vec::with_capacity(count - 2);
    let mut running_max = Vec::with_capacity(count - 2);
    let mut sum = 0.0;
    let mut best: f64 = 0.0;
    for (i, x) in segs.iter().enumerate() {
        sum += x;
        let k = (i + 1) as f64;
        if i + 1 >= 3 {
            let val = sum / (k * k.ln().ln()).sqrt();
            best = best.max(val.abs());
            values.push(val);
            running_max.push(best);
        }
    }
    Ok(LilTrajectory { values, running_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::make_sg;

    fn sg(level: u32) -> Arc<FamilySpec> {
        Arc::new(FamilySpec::single(make_sg(level).unwrap()))
    }
    fn mixed() -> Arc<FamilySpec> {
        Arc::new(FamilySpec::new(vec![(make_sg(2).unwrap(), 0.5), (make_sg(3).unwrap(), 0.5)]).unwrap())
    }
    fn small() -> McParams {
        McParams { segments: 40, replicas: 16, seed: 5 }
    }

    #[test]
    fn sg2_hausdorff_pressure_is_linear() {
        for a in [0.0, 0.5, 1.3] {
            let e = estimate_gamma(&PressureKind::Hausdorff, a, sg(2), 1, small()).unwrap();
            assert!((e.value - (3f64.ln() - a * 2f64.ln())).abs() < 1e-14);
            assert_eq!(e.std_error, 0.0);
        }
    }

    #[test]
    fn closed_form_dimensions() {
        let mc = small();
        let df = solve_dimension(&PressureKind::Hausdorff, sg(2), 1, mc, EXACT_TOL).unwrap();
        assert!((df.root - 3f64.ln() / 2f64.ln()).abs() < 1e-12);
        let dr = solve_dimension(&PressureKind::Resistance, sg(2), 2, mc, EXACT_TOL).unwrap();
        assert!((dr.root - 3f64.ln() / (5.0f64 / 3.0).ln()).abs() < 1e-12);
        let ds = solve_dimension(&PressureKind::Spectral(WeightSystem::Unit), sg(2), 1, mc, EXACT_TOL).unwrap();
        assert!((ds.root - 2.0 * 3f64.ln() / 5f64.ln()).abs() < 1e-12);
        let ds3 = solve_dimension(&PressureKind::Spectral(WeightSystem::Unit), sg(3), 1, mc, EXACT_TOL).unwrap();
        assert!((ds3.root - 2.0 * 6f64.ln() / (90.0f64 / 7.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn v1_mixed_gamma_at_one() {
        let e = estimate_gamma(&PressureKind::Hausdorff, 1.0, mixed(), 1, McParams::default()).unwrap();
        let exact = (1.5f64.ln() + 2f64.ln()) / 2.0;
        assert!((e.value - exact).abs() < 3.0 * e.std_error, "{} vs {exact} ± {}", e.value, e.std_error);
        assert_eq!(e.mean_neck_gap, 1.0);
    }

    #[test]
    fn samples_match_explicit_trees() {
        let mc = McParams { segments: 1, replicas: 4, seed: 11 };
        let fam = mixed();
        let s = PressureSamples::generate(fam.clone(), 2, mc).unwrap();
        let kind = PressureKind::Spectral(WeightSystem::Custom(vec![vec![1.0, 2.0, 0.5], vec![1.0; 6]]));
        let vals = s.segment_values(&kind, 1.1).unwrap();
        for r in 0..4 {
            let mut t = VTree::with_replica(fam.clone(), 2, 11, r as u64).unwrap();
            let x = first_segment_value(&mut t, &kind, 1.1).unwrap();
            assert!((x - vals[r][0]).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn spectral_segment_matches_enumeration() {
        let fam = mixed();
        let ws = WeightSystem::Custom(vec![vec![1.0, 2.0, 0.5], vec![1.5, 0.7, 1.0, 1.0, 2.0, 0.9]]);
        let w = ws.resolve(&fam).unwrap();
        let beta = 1.37;
        for seed in 0..20 {
            let mut t = VTree::new(fam.clone(), 2, seed).unwrap().with_forced_necks([2]);
            if t.neck_levels(1).unwrap()[0] != 2 {
                continue;
            }
            let x = first_segment_value(&mut t, &PressureKind::Spectral(ws.clone()), beta).unwrap();
            let mut terms = Vec::new();
            for (a, _) in t.nodes_at(2).unwrap() {
                let (mut wp, mut rp, mut ty) = (1.0, 1.0, t.root_type());
                for (m, &d) in a.iter().enumerate() {
                    let e = &t.env(m + 1).entries[ty];
                    wp *= w[e.ifs][d];
                    rp *= fam.members()[e.ifs].r()[d];
                    ty = e.child_types[d] as usize;
                }
                terms.push((wp, rp));
            }
            let total_w: f64 = terms.iter().map(|t| t.0).sum();
            let brute: f64 = terms.iter().map(|(w, r)| (r * w / total_w).powf(beta / 2.0)).sum::<f64>().ln();
            assert!((x - brute).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn replayable_and_scale_invariant() {
        let fam = mixed();
        let kind = PressureKind::Spectral(WeightSystem::flat(2.0));
        let a = estimate_gamma(&kind, 1.3, fam.clone(), 2, small()).unwrap();
        let b = estimate_gamma(&kind, 1.3, fam.clone(), 2, small()).unwrap();
        assert_eq!(a.replica_values, b.replica_values);
        let scaled = PressureKind::Spectral(WeightSystem::flat(2.0).scaled(&fam, 4.0).unwrap());
        let c = estimate_gamma(&scaled, 1.3, fam, 2, small()).unwrap();
        assert_eq!(a.replica_values, c.replica_values);
    }

    #[test]
    fn spectral_needs_valid_weights() {
        let kind = PressureKind::Spectral(WeightSystem::Custom(vec![vec![1.0]]));
        assert!(matches!(estimate_gamma(&kind, 1.0, mixed(), 1, small()), Err(Error::Precondition(_))));
    }

    #[test]
    fn grid_is_monotone_with_one_sign_change() {
        let s = PressureSamples::generate(mixed(), 2, small()).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| 0.4 * i as f64).collect();
        for kind in [PressureKind::Hausdorff, PressureKind::Resistance, PressureKind::Spectral(WeightSystem::Unit)] {
            let g = gamma_grid(&kind, &s, &grid).unwrap();
            assert!(g.strictly_decreasing && g.single_sign_change && g.slopes_within_bounds, "{kind:?}");
        }
    }

    #[test]
    fn flat_identity_single_ifs() {
        for (l, expected) in [(2, 3f64.ln() / 5f64.ln()), (3, 6f64.ln() / (90.0f64 / 7.0).ln())] {
            let r = flat_identity_check(sg(l), 1, small()).unwrap();
            assert!((r.lhs - expected).abs() < 1e-9 && (r.rhs - expected).abs() < 1e-9);
            assert!(r.passed);
        }
    }

    #[test]
    fn unit_weights_are_maximal_for_one_ifs() {
        let r = maximality_scan(sg(2), 1, small(), 3, 0.3).unwrap();
        assert!((r.flat_d_s - 2.0 * 3f64.ln() / 5f64.ln()).abs() < 1e-9);
        assert!(r.all_below && r.trials.iter().all(|t| t.d_s < r.flat_d_s));
        assert!(r.proportional_matches);
        let unit = solve_dimension(&PressureKind::Spectral(WeightSystem::Unit), sg(2), 1, small(), EXACT_TOL).unwrap();
        assert!((unit.root - r.flat_d_s).abs() < 1e-9);
    }

    #[test]
    fn lil_is_zero_for_sg2() {
        let d = 3f64.ln() / 2f64.ln();
        let t = lil_statistic(&PressureKind::Hausdorff, d, sg(2), 1, 200, 0).unwrap();
        assert!(t.values.iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }
}
