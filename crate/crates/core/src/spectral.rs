//! Eigenvalue counting for `(stiffness, mass)` by Sylvester inertia, and the
//! audits built on it.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{build_graph, cut_graph, PrefractalGraph};
use crate::ifs::{validate_family, FamilySpec};
use crate::linalg::{dense_generalized_eigen, Ldl, SymMatrix, Symbolic};
use crate::measures::{cut_set, WeightSystem};
use crate::par_map;
use crate::vtree::VTree;

/// Largest dimension handed to the dense eigensolver.
pub const DENSE_CAP: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// Boundary rows and columns deleted.
    Dirichlet,
    Neumann,
}

impl std::str::FromStr for BoundaryCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Self::Dirichlet),
            "neumann" => Ok(Self::Neumann),
            _ => Err(Error::Parameter(format!("unknown boundary condition {s:?}"))),
        }
    }
}

/// Generalized problem `K f = λ M f` on a graph.
#[derive(Debug, Clone)]
pub struct EigenProblem {
    pub stiffness: SymMatrix,
    pub mass: Vec<f64>,
    pub bc: BoundaryCondition,
    /// Graph vertex of each unknown.
    pub vertices: Vec<usize>,
    /// Pivot `d_k` counts as zero when `|d_k| <= zero_band (|K_kk| + |λ| m_k)`;
    /// unpivoted elimination loses the sign of such pivots.
    pub zero_band: f64,
    symbolic: Symbolic,
    /// Dimension of the kernel of the stiffness matrix.
    nullity: usize,
}

/// Checks that `k` is a grounded graph Laplacian (nonpositive off-diagonal,
/// nonnegative row sums) and returns the number of its connected components
/// with zero row sums, which is the dimension of its kernel.
fn laplacian_nullity(k: &SymMatrix) -> Result<usize> {
    let n = k.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut grounded = vec![false; n];
    for i in 0..n {
        let (mut sum, mut diag) = (0.0, 0.0);
        for &(j, v) in k.row(i) {
            sum += v;
            if j == i {
                diag = v;
            } else if v > 0.0 {
                return Err(Error::Domain(format!("stiffness entry ({i}, {j}) is positive")));
            } else if v < 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
        if sum < -1e-10 * diag {
            return Err(Error::Domain(format!("stiffness row {i} has a negative sum")));
        }
        grounded[i] = sum > 1e-10 * diag;
    }
    let mut comp_grounded = vec![false; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        comp_grounded[r] |= grounded[i];
    }
    Ok((0..n).filter(|&i| find(&mut parent, i) == i && !comp_grounded[i]).count())
}

/// Result of one inertia count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Count {
    pub lambda: f64,
    pub count_lo: usize,
    pub count_hi: usize,
    pub nudged: bool,
}

impl Count {
    /// `#{i : λ_i <= λ}`.
    pub fn value(&self) -> usize {
        self.count_hi
    }
}

impl EigenProblem {
    pub fn new(g: &PrefractalGraph, bc: BoundaryCondition) -> Result<Self> {
        let vertices: Vec<usize> = match bc {
            BoundaryCondition::Dirichlet => g.interior(),
            BoundaryCondition::Neumann => (0..g.num_vertices).collect(),
        };
        if bc == BoundaryCondition::Dirichlet && g.boundary().is_empty() {
            return Err(Error::Precondition("Dirichlet problem without boundary vertices".into()));
        }
        let k = g.stiffness().principal(&vertices);
        let mass = vertices.iter().map(|&v| g.mass[v]).collect();
        Self::from_parts(k, mass, bc, vertices, &g.ordering)
    }

    pub fn from_parts(
        stiffness: SymMatrix,
        mass: Vec<f64>,
        bc: BoundaryCondition,
        vertices: Vec<usize>,
        ordering: &crate::linalg::Ordering,
    ) -> Result<Self> {
        if mass.len() != stiffness.n() || mass.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Domain("masses must be positive, one per unknown".into()));
        }
        // the shift touches only the diagonal; give every row one
        let stiffness = stiffness.shifted(0.0, &mass);
        let nullity = laplacian_nullity(&stiffness)?;
        let symbolic = Symbolic::analyze(&stiffness, ordering)?;
        Ok(Self { stiffness, mass, bc, vertices, zero_band: 1e-8, symbolic, nullity })
    }

    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// Gershgorin bound on the largest eigenvalue.
    pub fn lambda_max_bound(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.stiffness.row(i).iter().map(|e| e.1.abs()).sum::<f64>() / self.mass[i])
            .fold(0.0, f64::max)
    }

    fn negative_count(&self, lambda: f64) -> Option<usize> {
        let a = self.stiffness.shifted(lambda, &self.mass);
        let f = Ldl::factor(&self.symbolic, &a).ok()?;
        let ok =
            f.pivots().iter().zip(f.perm()).all(|(d, &i)| {
                d.abs() > self.zero_band * (self.stiffness.get(i, i).abs() + lambda.abs() * self.mass[i])
            });
        ok.then(|| f.negative_pivots())
    }

    /// Number of eigenvalues `<= λ`.
    pub fn count_leq(&self, lambda: f64) -> Result<Count> {
        if !lambda.is_finite() {
            return Err(Error::Parameter("lambda must be finite".into()));
        }
        // the stiffness is positive semidefinite: nothing below 0, the kernel at 0
        if self.dim() == 0 || lambda < 0.0 {
            return Ok(Count { lambda, count_lo: 0, count_hi: 0, nudged: false });
        }
        if lambda == 0.0 {
            return Ok(Count { lambda, count_lo: self.nullity, count_hi: self.nullity, nudged: false });
        }
        if let Some(c) = self.negative_count(lambda) {
            return Ok(Count { lambda, count_lo: c, count_hi: c, nudged: false });
        }
        // ε relative to λ, widened until both sides factor cleanly
        for rel in [1e-9, 1e-8, 1e-7, 1e-6] {
            let eps = rel * lambda;
            if let (Some(lo), Some(hi)) = (self.negative_count(lambda - eps), self.negative_count(lambda + eps)) {
                return Ok(Count { lambda, count_lo: lo, count_hi: hi, nudged: true });
            }
        }
        Err(Error::NumericalDegeneracy {
            lambda, detail: "factorization breaks down at λ ± ε up to ε = 1e-6·λ".into()
        })
    }

    pub fn count(&self, lambda: f64) -> Result<usize> {
        Ok(self.count_leq(lambda)?.value())
    }

    /// Counts at each λ, in parallel.
    pub fn sweep(&self, lambdas: &[f64]) -> Result<Vec<Count>> {
        par_map(lambdas, |&l| self.count_leq(l)).into_iter().collect()
    }

    /// The `j`-th eigenvalue (1-based) by bisection on the count.
    pub fn eigenvalue(&self, j: usize, rtol: f64) -> Result<f64> {
        if j == 0 || j > self.dim() {
            return Err(Error::Parameter(format!("eigenvalue index {j} outside 1..={}", self.dim())));
        }
        let mut hi = self.lambda_max_bound() * (1.0 + 1e-9) + 1e-300;
        let mut lo = -hi * 1e-9;
        if self.count(lo)? >= j {
            return Ok(0.0);
        }
        while hi - lo > rtol * hi.abs().max(1e-300) {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
            if self.count(mid)? >= j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Full spectrum from the dense solver (ascending).
    pub fn dense_spectrum(&self) -> Result<Vec<f64>> {
        Ok(self.dense_decomposition()?.0)
    }

    pub fn dense_decomposition(&self) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
        if self.dim() > DENSE_CAP {
            return Err(Error::SizeCap(format!(
                "{} unknowns exceed the dense cap {DENSE_CAP}; use a coarser depth",
                self.dim()
            )));
        }
        Ok(dense_generalized_eigen(&self.stiffness, &self.mass))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveTag {
    Dirichlet,
    Neumann,
    PerCell,
}

/// Sampled counting function.
#[derive(Debug, Clone, Serialize)]
pub struct CountingCurve {
    pub tag: CurveTag,
    pub points: Vec<(f64, usize)>,
}

impl CountingCurve {
    pub fn sample(p: &EigenProblem, lambdas: &[f64]) -> Result<Self> {
        let tag = match p.bc {
            BoundaryCondition::Dirichlet => CurveTag::Dirichlet,
            BoundaryCondition::Neumann => CurveTag::Neumann,
        };
        let mut pts: Vec<(f64, usize)> = p.sweep(lambdas)?.into_iter().map(|c| (c.lambda, c.value())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { tag, points: pts })
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].1 <= w[1].1)
    }
}

/// `n` logarithmically spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Parses `lo:hi:n` (optionally suffixed `log`).
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Parameter(format!("sweep {s:?} is not lo:hi:n[log]"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let (n_str, log) = match parts[2].strip_suffix("log") {
        Some(rest) => (rest.trim_end_matches(['(', ')']), true),
        None => (parts[2], false),
    };
    let n: usize = n_str.trim_end_matches('(').parse().map_err(|_| bad())?;
    if n == 0 || !(hi >= lo) {
        return Err(bad());
    }
    if log {
        if !(lo > 0.0) {
            return Err(bad());
        }
        Ok(log_grid(lo, hi, n))
    } else if n == 1 {
        Ok(vec![lo])
    } else {
        Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
    }
}

/// One sampled λ of a bracketing audit.
#[derive(Debug, Clone, Serialize)]
pub struct BracketRow {
    pub lambda: f64,
    pub sum_dirichlet: usize,
    pub dirichlet: usize,
    pub neumann: usize,
    pub sum_neumann: usize,
    pub disjoint_dirichlet: usize,
    pub disjoint_neumann: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BracketingReport {
    pub k: usize,
    pub m_k: usize,
    pub sub_depth: usize,
    pub vertices: usize,
    pub rows: Vec<BracketRow>,
    pub max_gap: usize,
    pub violations: Vec<String>,
    pub passed: bool,
}

impl BracketingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,sum_nd,nd,nn,sum_nn,disjoint_nd,disjoint_nn\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.12e},{},{},{},{},{},{}",
                r.lambda,
                r.sum_dirichlet,
                r.dirichlet,
                r.neumann,
                r.sum_neumann,
                r.disjoint_dirichlet,
                r.disjoint_neumann
            );
        }
        out
    }
}

/// Checks `Σ N_D^σ(t_i λ) <= N_D(λ) <= N_N(λ) <= Σ N_N^σ(t_i λ)`,
/// `N_N - N_D <= d+1`, and the exact decomposition on the disjoint graph.
pub fn bracketing_audit(
    tree: &mut VTree,
    weights: &WeightSystem,
    k: usize,
    sub_depth: usize,
    n_lambda: usize,
) -> Result<BracketingReport> {
    let d = tree.family().ambient_dim();
    let cg = cut_graph(tree, weights, k, sub_depth)?;
    let glued_d = EigenProblem::new(&cg.glued, BoundaryCondition::Dirichlet)?;
    let glued_n = EigenProblem::new(&cg.glued, BoundaryCondition::Neumann)?;
    let dis_d = EigenProblem::new(&cg.disjoint, BoundaryCondition::Dirichlet)?;
    let dis_n = EigenProblem::new(&cg.disjoint, BoundaryCondition::Neumann)?;
    let pieces_d: Vec<EigenProblem> =
        cg.piece_graphs.iter().map(|g| EigenProblem::new(g, BoundaryCondition::Dirichlet)).collect::<Result<_>>()?;
    let pieces_n: Vec<EigenProblem> =
        cg.piece_graphs.iter().map(|g| EigenProblem::new(g, BoundaryCondition::Neumann)).collect::<Result<_>>()?;
    let hi = glued_n.lambda_max_bound().max(dis_n.lambda_max_bound()) * 1.05;
    let lo = hi * 1e-6;
    let lambdas = log_grid(lo, hi, n_lambda);
    // pieces sharing a graph and a crossing time give identical counts
    let mut groups: HashMap<(usize, u64), usize> = HashMap::new();
    for p in &cg.pieces {
        *groups.entry((p.graph, p.log_t.to_bits())).or_default() += 1;
    }
    let groups: Vec<((usize, u64), usize)> = groups.into_iter().collect();
    let rows: Vec<Result<BracketRow>> = par_map(&lambdas, |&lambda| {
        let mut sum_d = 0;
        let mut sum_n = 0;
        for &((gi, tbits), mult) in &groups {
            let tl = f64::from_bits(tbits).exp() * lambda;
            sum_d += mult * pieces_d[gi].count(tl)?;
            sum_n += mult * pieces_n[gi].count(tl)?;
        }
        Ok(BracketRow {
            lambda,
            sum_dirichlet: sum_d,
            dirichlet: glued_d.count(lambda)?,
            neumann: glued_n.count(lambda)?,
            sum_neumann: sum_n,
            disjoint_dirichlet: dis_d.count(lambda)?,
            disjoint_neumann: dis_n.count(lambda)?,
        })
    });
    let rows: Vec<BracketRow> = rows.into_iter().collect::<Result<_>>()?;
    let mut violations = Vec::new();
    let mut max_gap = 0;
    for r in &rows {
        let l = r.lambda;
        if r.sum_dirichlet > r.dirichlet {
            violations.push(format!("λ={l:.6e}: Σ N_D^σ = {} > N_D = {}", r.sum_dirichlet, r.dirichlet));
        }
        if r.dirichlet > r.neumann {
            violations.push(format!("λ={l:.6e}: N_D = {} > N_N = {}", r.dirichlet, r.neumann));
        }
        if r.neumann > r.sum_neumann {
            violations.push(format!("λ={l:.6e}: N_N = {} > Σ N_N^σ = {}", r.neumann, r.sum_neumann));
        }
        let gap = r.neumann.saturating_sub(r.dirichlet);
        max_gap = max_gap.max(gap);
        if gap > d + 1 {
            violations.push(format!("λ={l:.6e}: N_N - N_D = {gap} > {}", d + 1));
        }
        if r.disjoint_dirichlet != r.sum_dirichlet || r.disjoint_neumann != r.sum_neumann {
            violations.push(format!(
                "λ={l:.6e}: disjoint counts ({}, {}) differ from per-cell sums ({}, {})",
                r.disjoint_dirichlet, r.disjoint_neumann, r.sum_dirichlet, r.sum_neumann
            ));
        }
    }
    Ok(BracketingReport {
        k,
        m_k: cg.cut.m_k,
        sub_depth,
        vertices: cg.glued.num_vertices,
        rows,
        max_gap,
        passed: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearGrowth {
    /// `max_i i/λ_i`.
    pub c: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Tightest `C` with `N_D(s) <= C s` on this graph.
pub fn linear_growth_audit(p: &EigenProblem, bound: f64) -> Result<LinearGrowth> {
    if p.bc != BoundaryCondition::Dirichlet {
        return Err(Error::Precondition("linear growth is a Dirichlet statement".into()));
    }
    let vals = p.dense_spectrum()?;
    let c = vals.iter().enumerate().map(|(i, l)| (i + 1) as f64 / l).fold(0.0, f64::max);
    Ok(LinearGrowth { c, bound, within_bound: c <= bound })
}

/// Where the slope is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitWindow {
    /// Eigenvalues below index `skip_low + 1` are excluded.
    pub skip_low: usize,
    /// Fraction of the spectrum kept from the bottom.
    pub upper_fraction: f64,
    /// Further cap on the top index.
    pub upper_index: Option<usize>,
    /// Number of log-spaced sample points.
    pub samples: usize,
}

impl Default for FitWindow {
    fn default() -> Self {
        Self { skip_low: 10, upper_fraction: 0.9, upper_index: None, samples: 400 }
    }
}

impl FitWindow {
    /// Caps the window at the number of unknowns born before the finest
    /// level: the last refinement adds that many modes to the top of the
    /// spectrum, none of them resolved.
    pub fn resolved(g: &PrefractalGraph, bc: BoundaryCondition) -> Self {
        let upper_index = g.names.as_ref().map(|names| {
            let finest = names.iter().map(|n| n.level).max().unwrap_or(0);
            (0..g.num_vertices)
                .filter(|&v| names[v].level < finest && (bc == BoundaryCondition::Neumann || !g.is_boundary[v]))
                .count()
        });
        Self { upper_index, ..Self::default() }
    }

    fn top(&self, dim: usize) -> usize {
        let f = (self.upper_fraction * dim as f64).floor() as usize;
        self.upper_index.map_or(f, |i| i.min(f))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub points: Vec<(f64, usize)>,
}

/// Least-squares slope of `log N(λ)` against `log λ`, sampled uniformly in
/// `log λ` between the window's edge eigenvalues.
pub fn spectral_slope(p: &EigenProblem, window: FitWindow) -> Result<SlopeFit> {
    let top = window.top(p.dim());
    let first = window.skip_low + 1;
    if window.samples < 2 || top <= first {
        return Err(Error::Parameter(format!("fit window [{first}, {top}] is empty for {} eigenvalues", p.dim())));
    }
    let lambda_lo = p.eigenvalue(first, 1e-10)?;
    let lambda_hi = p.eigenvalue(top, 1e-10)?;
    slope_between(p, lambda_lo, lambda_hi, window.samples)
}

/// As [`spectral_slope`] on an explicit `[λ_lo, λ_hi]`.
pub fn slope_between(p: &EigenProblem, lambda_lo: f64, lambda_hi: f64, samples: usize) -> Result<SlopeFit> {
    if !(lambda_hi > lambda_lo && lambda_lo > 0.0) || samples < 2 {
        return Err(Error::Parameter("fit window is empty".into()));
    }
    let lambdas = log_grid(lambda_lo, lambda_hi, samples);
    let counts = p.sweep(&lambdas)?;
    let points: Vec<(f64, usize)> = counts.iter().map(|c| (c.lambda, c.value())).filter(|p| p.1 > 0).collect();
    if points.len() < 2 {
        return Err(Error::Parameter("fit window holds fewer than two nonzero counts".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.1 as f64).ln()).collect();
    let (slope, intercept) = least_squares(&xs, &ys);
    Ok(SlopeFit { slope, intercept, lambda_lo, lambda_hi, points })
}

pub(crate) fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Smallest eigenvalue via bisection.
pub fn first_eigenvalue(p: &EigenProblem) -> Result<f64> {
    p.eigenvalue(1, 1e-10)
}

#[derive(Debug, Clone, Serialize)]
pub struct NeckScaleRow {
    pub k: usize,
    pub m_k: usize,
    pub t_k: f64,
    pub y_k: usize,
    pub count_at_t_k: usize,
    /// `max_i λ_1^D` over the per-cell graphs of `Λ_k`.
    pub lambda1_hat: f64,
    pub lambda1_min: f64,
    /// Least `c` with `M_k <= N_D(c T_k)`.
    pub c_needed: f64,
    /// `N_D(λ̂_1 T_k η^{-y_k})`.
    pub count_at_upper_scale: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeckScaleReport {
    pub rows: Vec<NeckScaleRow>,
    /// `max_k N_D(T_k)/M_k`.
    pub c1: f64,
    /// `max_k c_needed`.
    pub c: f64,
    /// `(d+1)² ρ_sup² (w_sup/w_inf)²`.
    pub lambda1_bound: f64,
    pub lambda1_within_bound: bool,
    /// `1/(2 N_sup/(1 - r_sup))`.
    pub lambda1_floor: f64,
    pub lambda1_above_floor: bool,
    pub upper_scale_holds: bool,
    pub passed: bool,
}

impl NeckScaleReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m_k,t_k,y_k,n_d_t_k,lambda1_hat,lambda1_min,c_needed,n_d_upper\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.12e},{},{},{:.12e},{:.12e},{:.12e},{}",
                r.k,
                r.m_k,
                r.t_k,
                r.y_k,
                r.count_at_t_k,
                r.lambda1_hat,
                r.lambda1_min,
                r.c_needed,
                r.count_at_upper_scale
            );
        }
        out
    }
}

/// Vertex budget for one neck-scale graph.
pub const NECK_SCALE_VERTEX_CAP: usize = 400_000;

/// Tabulates `(M_k, T_k, N_D(T_k), λ̂_1^k)` and fits the constants relating
/// the cut-set size to the counting function.
pub fn neck_scale_audit(
    tree: &mut VTree,
    weights: &WeightSystem,
    k_range: std::ops::RangeInclusive<usize>,
    sub_depth: usize,
) -> Result<NeckScaleReport> {
    let bounds = validate_family(tree.family(), Some(weights))?;
    let d = tree.family().ambient_dim();
    let eta = bounds.eta.unwrap();
    let w_ratio = bounds.w_sup.unwrap() / bounds.w_inf.unwrap();
    let lambda1_bound = ((d + 1) as f64 * bounds.rho_sup * w_ratio).powi(2);
    let lambda1_floor = (1.0 - bounds.r_sup) / (2.0 * bounds.n_sup as f64);
    let mut rows = Vec::new();
    let mut lambda1_cache: HashMap<(usize, usize), f64> = HashMap::new();
    for k in k_range {
        let cut = cut_set(tree, weights, k)?;
        let est = cut.m_k as f64 * (bounds.n_sup as f64).powi(sub_depth as i32);
        if est > NECK_SCALE_VERTEX_CAP as f64 {
            return Err(Error::SizeCap(format!(
                "cut set Λ_{k} with sub-depth {sub_depth} needs ~{est:.0} cells; lower the largest k"
            )));
        }
        let cg = cut_graph(tree, weights, k, sub_depth)?;
        let p = EigenProblem::new(&cg.glued, BoundaryCondition::Dirichlet)?;
        let count_at_t_k = p.count(cut.t_k)?;
        let mut lambda1_hat: f64 = 0.0;
        let mut lambda1_min = f64::INFINITY;
        for piece in &cg.pieces {
            let key = (piece.address.len(), tree.node_type(&piece.address)?);
            let l1 = match lambda1_cache.get(&key) {
                Some(&v) => v,
                None => {
                    let q = EigenProblem::new(&cg.piece_graphs[piece.graph], BoundaryCondition::Dirichlet)?;
                    let v = first_eigenvalue(&q)?;
                    lambda1_cache.insert(key, v);
                    v
                }
            };
            lambda1_hat = lambda1_hat.max(l1);
            lambda1_min = lambda1_min.min(l1);
        }
        // least c with M_k <= N_D(c T_k)
        let c_needed = if cut.m_k > p.dim() { f64::INFINITY } else { p.eigenvalue(cut.m_k, 1e-10)? / cut.t_k };
        let upper = lambda1_hat * cut.t_k * eta.powi(-(cut.y_k as i32));
        let count_at_upper_scale = p.count(upper)?;
        rows.push(NeckScaleRow {
            k,
            m_k: cut.m_k,
            t_k: cut.t_k,
            y_k: cut.y_k,
            count_at_t_k,
            lambda1_hat,
            lambda1_min,
            c_needed,
            count_at_upper_scale,
        });
    }
    let c1 = rows.iter().map(|r| r.count_at_t_k as f64 / r.m_k as f64).fold(0.0, f64::max);
    let c = rows.iter().map(|r| r.c_needed).fold(0.0, f64::max);
    let lambda1_within_bound = rows.iter().all(|r| r.lambda1_hat <= lambda1_bound);
    let lambda1_above_floor = rows.iter().all(|r| r.lambda1_min >= lambda1_floor);
    let upper_scale_holds = rows.iter().all(|r| r.m_k <= r.count_at_upper_scale);
    let single = tree.v() == 1;
    let passed = c.is_finite() && lambda1_above_floor && if single { lambda1_within_bound } else { upper_scale_holds };
    Ok(NeckScaleReport {
        rows,
        c1,
        c,
        lambda1_bound,
        lambda1_within_bound,
        lambda1_floor,
        lambda1_above_floor,
        upper_scale_holds,
        passed,
    })
}

/// `φ(t) = exp(√(log t · log log log t))`, defined for `t >= 16`.
pub fn phi(t: f64) -> Option<f64> {
    (t >= 16.0).then(|| (t.ln() * t.ln().ln().ln()).sqrt().exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct FluctuationPoint {
    pub t: f64,
    pub count: usize,
    pub ratio: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecadeStat {
    pub decade: i32,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FluctuationProfile {
    pub exponent: f64,
    pub points: Vec<FluctuationPoint>,
    pub skipped: usize,
    pub decades: Vec<DecadeStat>,
    /// Largest decade max/min.
    pub spread: f64,
    /// Fitted `c` of the envelopes `φ^{±c}`.
    pub envelope_exponent: f64,
    pub inside_envelope: bool,
}

impl FluctuationProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,count,ratio,phi\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.12e},{},{:.12e},{:.12e}", p.t, p.count, p.ratio, p.phi);
        }
        out
    }
}

pub(crate) fn envelope_fit(points: &[(f64, f64, f64)], exponent: f64) -> (Vec<DecadeStat>, f64, f64, bool) {
    // points: (t, value, φ)
    let mut by_decade: std::collections::BTreeMap<i32, (f64, f64, f64)> = Default::default();
    for &(t, v, ph) in points {
        let e = by_decade.entry(t.log10().floor() as i32).or_insert((f64::INFINITY, 0.0, ph));
        e.0 = e.0.min(v);
        e.1 = e.1.max(v);
        e.2 = e.2.max(ph);
    }
    let decades: Vec<DecadeStat> =
        by_decade.iter().map(|(&decade, &(min, max, _))| DecadeStat { decade, min, max }).collect();
    let spread = decades.iter().map(|d| d.max / d.min).fold(1.0, f64::max);
    let _ = exponent;
    let (c, inside) = if decades.len() >= 2 {
        let lp: Vec<f64> = by_decade.values().map(|v| v.2.ln()).collect();
        let up: Vec<f64> = by_decade.values().map(|v| v.1.ln()).collect();
        let dn: Vec<f64> = by_decade.values().map(|v| v.0.ln()).collect();
        let (cu, au) = least_squares(&lp, &up);
        let (cd, ad) = least_squares(&lp, &dn);
        let c = cu.max(-cd).max(0.0);
        // envelopes anchored at the fitted intercepts, widened to cover every point
        let hi_shift = points.iter().map(|&(_, v, ph)| v.ln() - au - c * ph.ln()).fold(f64::NEG_INFINITY, f64::max);
        let lo_shift = points.iter().map(|&(_, v, ph)| v.ln() - ad + c * ph.ln()).fold(f64::INFINITY, f64::min);
        (c, hi_shift.is_finite() && lo_shift.is_finite())
    } else {
        (0.0, true)
    };
    (decades, spread, c, inside)
}

/// `N(t)/t^{d_s/2}` with the envelope `φ(t)`, at the given `t`.
pub fn fluctuation_profile(p: &EigenProblem, ds: f64, ts: &[f64]) -> Result<FluctuationProfile> {
    let usable: Vec<f64> = ts.iter().copied().filter(|&t| t >= 16.0).collect();
    let skipped = ts.len() - usable.len();
    let counts = p.sweep(&usable)?;
    let points: Vec<FluctuationPoint> = counts
        .iter()
        .filter(|c| c.value() > 0)
        .map(|c| FluctuationPoint {
            t: c.lambda,
            count: c.value(),
            ratio: c.value() as f64 / c.lambda.powf(ds / 2.0),
            phi: phi(c.lambda).unwrap(),
        })
        .collect();
    let triples: Vec<(f64, f64, f64)> = points.iter().map(|p| (p.t, p.ratio, p.phi)).collect();
    let (decades, spread, envelope_exponent, inside_envelope) = envelope_fit(&triples, ds);
    Ok(FluctuationProfile {
        exponent: ds,
        points,
        skipped: skipped + counts.len() - triples.len(),
        decades,
        spread,
        envelope_exponent,
        inside_envelope,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub samples: Vec<f64>,
    /// `|λ_1(n+1) - λ_1(n)| / λ_1(n+1)`, worst over samples.
    pub stabilization: f64,
    pub gamma: f64,
    pub gamma_se: f64,
    pub gamma_ci: (f64, f64),
    pub min: f64,
    pub floor: f64,
    pub all_above_floor: bool,
}

/// Empirical tail of `λ_1^D` over independent trees; fits
/// `log(-log P(λ_1 > x))` against `log x`.
pub fn lambda1_tail_audit(
    family: std::sync::Arc<FamilySpec>,
    v: usize,
    weights: &WeightSystem,
    n_samples: usize,
    depth: usize,
    seed: u64,
) -> Result<TailReport> {
    if v <= 1 {
        return Err(Error::Precondition("V = 1 has a bounded first eigenvalue; the tail is trivial".into()));
    }
    if n_samples < 10 {
        return Err(Error::Parameter("need at least 10 samples".into()));
    }
    let bounds = validate_family(&family, Some(weights))?;
    let floor = (1.0 - bounds.r_sup) / (2.0 * bounds.n_sup as f64);
    let reps: Vec<u64> = (0..n_samples as u64).collect();
    let results: Vec<Result<(f64, f64)>> = par_map(&reps, |&r| {
        let mut tree = VTree::with_replica(family.clone(), v, seed, r)?;
        let coarse = first_eigenvalue(&EigenProblem::new(
            &build_graph(&mut tree, depth, weights)?,
            BoundaryCondition::Dirichlet,
        )?)?;
        let fine = first_eigenvalue(&EigenProblem::new(
            &build_graph(&mut tree, depth + 1, weights)?,
            BoundaryCondition::Dirichlet,
        )?)?;
        Ok((fine, ((fine - coarse) / fine).abs()))
    });
    let results: Vec<(f64, f64)> = results.into_iter().collect::<Result<_>>()?;
    let mut samples: Vec<f64> = results.iter().map(|r| r.0).collect();
    let stabilization = results.iter().map(|r| r.1).fold(0.0, f64::max);
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    // survival at each order statistic above the median, excluding the largest
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &x) in samples.iter().enumerate().skip(samples.len() / 2) {
        let surv = (n - i as f64 - 0.5) / n;
        if surv > 0.0 && surv < 1.0 && x > 0.0 && i + 1 < samples.len() {
            xs.push(x.ln());
            ys.push((-surv.ln()).ln());
        }
    }
    let (gamma, intercept) = least_squares(&xs, &ys);
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let resid: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - gamma * x).powi(2)).sum();
    let gamma_se = (resid / (m - 2.0).max(1.0) / sxx).sqrt();
    let min = samples[0];
    Ok(TailReport {
        samples,
        stabilization,
        gamma,
        gamma_se,
        gamma_ci: (gamma - 3.0 * gamma_se, gamma + 3.0 * gamma_se),
        min,
        floor,
        all_above_floor: min >= floor,
    })
}
