//! Finite graph approximations of a V-variable gasket.
//!
//! A vertex is named combinatorially: either a point of `V_0`, or a level-1
//! vertex `v > d` of the gluing table of the cell in which it first appears.
//! That cell is unique because distinct cells share only corners, so equal
//! names mean equal points and the graph is glued without any floating
//! point comparisons. When every IFS carries exact placements the names are
//! cross-checked against rational coordinates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ifs::{validate_family, Placement};
use crate::linalg::{pcg, Ldl, Ordering, SymMatrix, Symbolic, CG_RTOL, DIRECT_SOLVE_CAP};
use crate::measures::{CutSet, MeasureContext, WeightSystem};
use crate::vtree::VTree;

type Q = Ratio<i128>;

/// Combinatorial vertex name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VName {
    /// Level at which the vertex first appears (0 for `V_0`).
    pub level: u32,
    /// Address of the cell whose level-1 table introduces it.
    pub parent: Vec<u32>,
    pub local: u32,
    /// Copy index in disjoint unions.
    pub tag: u32,
}

impl VName {
    fn corner(j: usize) -> Self {
        VName { level: 0, parent: Vec::new(), local: j as u32, tag: 0 }
    }
    fn tagged(&self, tag: u32) -> Self {
        VName { tag, ..self.clone() }
    }
}

/// A leaf cell of a graph.
#[derive(Debug, Clone, Serialize)]
pub struct CellRecord {
    pub address: Vec<usize>,
    pub log_rho: f64,
    pub log_mu: f64,
    pub corners: Vec<usize>,
    /// Index of the top cell it was subdivided from.
    pub top: usize,
}

/// Graph with conductances, vertex masses and a boundary set.
#[derive(Debug, Clone)]
pub struct PrefractalGraph {
    pub num_vertices: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub mass: Vec<f64>,
    pub is_boundary: Vec<bool>,
    /// Cartesian coordinates when the geometry is realized.
    pub coords: Option<Vec<[f64; 2]>>,
    pub names: Option<Vec<VName>>,
    pub cells: Vec<CellRecord>,
    pub tops: Vec<Vec<usize>>,
    /// Corner vertex ids of each top cell.
    pub top_corners: Vec<Vec<usize>>,
    pub ordering: Ordering,
}

/// Options for graph assembly.
#[derive(Debug, Clone)]
pub struct GraphOptions {
    /// How many levels past a cell to search for the neck normalizing its mass.
    pub mass_horizon: usize,
    pub check_geometry: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { mass_horizon: 100_000, check_geometry: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Glued,
    /// Each top cell gets its own copy of its vertices.
    Disjoint,
}

#[derive(Debug, Clone)]
pub enum BoundarySpec {
    /// The points of `V_0`.
    Global,
    /// Corners of every top cell.
    TopCorners,
    /// Corners of the listed top cells, minus corners of the excluded ones.
    CornersExcept { include: Vec<usize>, exclude: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Affine {
    scale: Q,
    offset: [Q; 2],
    half_turn: bool,
}

fn q128(x: &crate::ifs::Rational) -> Q {
    Q::new(*x.numer() as i128, *x.denom() as i128)
}

impl Affine {
    fn identity() -> Self {
        Affine { scale: Q::one(), offset: [Q::zero(), Q::zero()], half_turn: false }
    }
    fn compose(&self, p: &Placement) -> Affine {
        let s = if self.half_turn { -self.scale } else { self.scale };
        Affine {
            scale: self.scale * q128(&p.scale),
            offset: [self.offset[0] + s * q128(&p.offset[0]), self.offset[1] + s * q128(&p.offset[1])],
            half_turn: self.half_turn != p.half_turn,
        }
    }
    fn corners(&self) -> [[Q; 2]; 3] {
        let s = if self.half_turn { -self.scale } else { self.scale };
        [self.offset, [self.offset[0] + s, self.offset[1]], [self.offset[0], self.offset[1] + s]]
    }
}

#[derive(Debug, Clone)]
struct CellState {
    addr: Vec<usize>,
    ty: usize,
    corners: Vec<VName>,
    log_w: f64,
    log_r: f64,
    place: Option<Affine>,
}

struct Expander {
    log_w: Vec<Vec<f64>>,
    log_r: Vec<Vec<f64>>,
    realized: bool,
}

impl Expander {
    fn new(tree: &VTree, ctx: &MeasureContext) -> Self {
        let fam = tree.family();
        Self {
            log_w: ctx.weights.iter().map(|w| w.iter().map(|x| x.ln()).collect()).collect(),
            log_r: fam.members().iter().map(|m| m.r().iter().map(|x| x.ln()).collect()).collect(),
            realized: fam.members().iter().all(|m| m.placements().is_some()) && fam.ambient_dim() == 2,
        }
    }

    fn root(&self, tree: &VTree) -> CellState {
        let d = tree.family().ambient_dim();
        CellState {
            addr: Vec::new(),
            ty: tree.root_type(),
            corners: (0..=d).map(VName::corner).collect(),
            log_w: 0.0,
            log_r: 0.0,
            place: self.realized.then(Affine::identity),
        }
    }

    fn child(&self, tree: &VTree, s: &CellState, i: usize) -> CellState {
        let m = s.addr.len();
        let entry = &tree.env(m + 1).entries[s.ty];
        let f = &tree.family().members()[entry.ifs];
        let d = f.ambient_dim();
        let corners = f.cells()[i]
            .iter()
            .map(|&t| {
                if t <= d {
                    s.corners[t].clone()
                } else {
                    VName {
                        level: (m + 1) as u32,
                        parent: s.addr.iter().map(|&x| x as u32).collect(),
                        local: t as u32,
                        tag: 0,
                    }
                }
            })
            .collect();
        let mut addr = s.addr.clone();
        addr.push(i);
        CellState {
            addr,
            ty: entry.child_types[i] as usize,
            corners,
            log_w: s.log_w + self.log_w[entry.ifs][i],
            log_r: s.log_r + self.log_r[entry.ifs][i],
            place: s.place.as_ref().map(|p| p.compose(&f.placements().unwrap()[i])),
        }
    }

    fn num_children(&self, tree: &VTree, s: &CellState) -> usize {
        tree.env(s.addr.len() + 1).entries[s.ty].child_types.len()
    }

    fn descend(&self, tree: &mut VTree, addr: &[usize]) -> Result<CellState> {
        tree.realize(addr.len())?;
        let mut s = self.root(tree);
        for &i in addr {
            if i >= self.num_children(tree, &s) {
                return Err(Error::InvalidAddress(format!("{addr:?}")));
            }
            s = self.child(tree, &s, i);
        }
        Ok(s)
    }
}

fn mass_factors(
    tree: &mut VTree,
    ctx: &MeasureContext,
    level: usize,
    horizon: usize,
    cache: &mut HashMap<usize, Vec<f64>>,
) -> Result<Vec<f64>> {
    if let Some(v) = cache.get(&level) {
        return Ok(v.clone());
    }
    let mut found = level == 0;
    for l in level.max(1)..=level + horizon {
        if tree.is_neck(l)? {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::Precondition(format!(
            "no neck within {horizon} levels below level {level}; masses are undefined"
        )));
    }
    let v = ctx.log_mu_over_w_by_type(tree, level)?;
    cache.insert(level, v.clone());
    Ok(v)
}

fn to_cartesian(p: &[Q; 2]) -> [f64; 2] {
    let a = p[0].to_f64().unwrap();
    let b = p[1].to_f64().unwrap();
    [a + 0.5 * b, b * 3f64.sqrt() / 2.0]
}

/// Subdivides each top cell `sub_depth` more levels and glues the leaves.
pub fn assemble(
    tree: &mut VTree,
    weights: &WeightSystem,
    tops: &[Vec<usize>],
    sub_depth: usize,
    layout: Layout,
    boundary: BoundarySpec,
    opts: &GraphOptions,
) -> Result<PrefractalGraph> {
    validate_family(tree.family(), Some(weights))?;
    let ctx = MeasureContext::new(tree.family(), weights)?;
    let ex = Expander::new(tree, &ctx);
    let max_level = tops.iter().map(|a| a.len()).max().unwrap_or(0) + sub_depth;
    tree.realize(max_level)?;
    let mut leaves: Vec<(usize, CellState)> = Vec::new();
    let mut top_corners: Vec<Vec<VName>> = Vec::new();
    for (ti, addr) in tops.iter().enumerate() {
        let start = ex.descend(tree, addr)?;
        let tag = if layout == Layout::Disjoint { ti as u32 + 1 } else { 0 };
        top_corners.push(start.corners.iter().map(|c| c.tagged(tag)).collect());
        let mut frontier = vec![start];
        for _ in 0..sub_depth {
            let mut next = Vec::with_capacity(frontier.len() * 3);
            for s in &frontier {
                for i in 0..ex.num_children(tree, s) {
                    next.push(ex.child(tree, s, i));
                }
            }
            frontier = next;
        }
        leaves.extend(frontier.into_iter().map(|s| (ti, s)));
    }
    let tag_of = |ti: usize| if layout == Layout::Disjoint { ti as u32 + 1 } else { 0 };
    // vertex ids in birth order
    let mut all_names: BTreeSet<VName> = BTreeSet::new();
    for (ti, s) in &leaves {
        for c in &s.corners {
            all_names.insert(c.tagged(tag_of(*ti)));
        }
    }
    let names: Vec<VName> = all_names.into_iter().collect();
    let index: HashMap<&VName, usize> = names.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let nv = names.len();
    let mut mass = vec![0.0; nv];
    let mut edges = Vec::new();
    let mut seen_edges: HashSet<(usize, usize)> = HashSet::new();
    let mut cells = Vec::with_capacity(leaves.len());
    let mut exact: Vec<Option<[Q; 2]>> = vec![None; nv];
    let mut cache = HashMap::new();
    for (ti, s) in &leaves {
        let factors = mass_factors(tree, &ctx, s.addr.len(), opts.mass_horizon, &mut cache)?;
        let log_mu = s.log_w + factors[s.ty];
        let mu = log_mu.exp();
        let rho = (-s.log_r).exp();
        let ids: Vec<usize> = s.corners.iter().map(|c| index[&c.tagged(tag_of(*ti))]).collect();
        let share = mu / ids.len() as f64;
        for &v in &ids {
            mass[v] += share;
        }
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                let e = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                if !seen_edges.insert(e) {
                    return Err(Error::Geometry(format!("edge {e:?} lies in two cells")));
                }
                edges.push((e.0, e.1, rho));
            }
        }
        if let Some(p) = &s.place {
            if opts.check_geometry {
                for (v, c) in ids.iter().zip(p.corners()) {
                    match &exact[*v] {
                        None => exact[*v] = Some(c),
                        Some(prev) if *prev != c => {
                            return Err(Error::Geometry(format!("vertex {:?} has two positions", names[*v])));
                        }
                        _ => {}
                    }
                }
            }
        }
        cells.push(CellRecord { address: s.addr.clone(), log_rho: -s.log_r, log_mu, corners: ids, top: *ti });
    }
    let coords = if ex.realized && opts.check_geometry {
        let mut at: HashMap<[Q; 2], usize> = HashMap::new();
        for (v, p) in exact.iter().enumerate() {
            let p = p.expect("every vertex lies in a leaf");
            if layout == Layout::Glued {
                if let Some(u) = at.insert(p, v) {
                    return Err(Error::Geometry(format!(
                        "distinct vertices {:?} and {:?} coincide",
                        names[u], names[v]
                    )));
                }
            }
        }
        Some(exact.iter().map(|p| to_cartesian(p.as_ref().unwrap())).collect())
    } else {
        None
    };
    let boundary_names: HashSet<VName> = match &boundary {
        BoundarySpec::Global => (0..=tree.family().ambient_dim()).map(|j| VName::corner(j)).collect(),
        BoundarySpec::TopCorners => top_corners.iter().flatten().cloned().collect(),
        BoundarySpec::CornersExcept { include, exclude } => {
            let ex: HashSet<&VName> = exclude.iter().flat_map(|&t| top_corners[t].iter()).collect();
            include.iter().flat_map(|&t| top_corners[t].iter()).filter(|c| !ex.contains(c)).cloned().collect()
        }
    };
    let is_boundary = names.iter().map(|n| boundary_names.contains(n)).collect();
    let top_corner_ids = top_corners.iter().map(|cs| cs.iter().map(|c| index[c]).collect()).collect();
    Ok(PrefractalGraph {
        num_vertices: nv,
        edges,
        mass,
        is_boundary,
        coords,
        names: Some(names),
        cells,
        tops: tops.to_vec(),
        top_corners: top_corner_ids,
        ordering: Ordering::Reverse,
    })
}

/// The level-`depth` graph `G_n` with equal-split vertex masses.
pub fn build_graph(tree: &mut VTree, depth: usize, weights: &WeightSystem) -> Result<PrefractalGraph> {
    assemble(tree, weights, &[Vec::new()], depth, Layout::Glued, BoundarySpec::Global, &GraphOptions::default())
}

impl PrefractalGraph {
    /// Graph Laplacian (stiffness matrix).
    pub fn stiffness(&self) -> SymMatrix {
        let mut t = Vec::with_capacity(self.edges.len() * 3);
        for &(u, v, c) in &self.edges {
            t.push((u, u, c));
            t.push((v, v, c));
            t.push((u, v, -c));
        }
        SymMatrix::from_triplets(self.num_vertices, t)
    }

    pub fn boundary(&self) -> Vec<usize> {
        (0..self.num_vertices).filter(|&v| self.is_boundary[v]).collect()
    }

    pub fn interior(&self) -> Vec<usize> {
        (0..self.num_vertices).filter(|&v| !self.is_boundary[v]).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `Σ c_uv (f(u) - f(v))²`.
    pub fn energy(&self, f: &[f64]) -> f64 {
        self.edges.iter().map(|&(u, v, c)| c * (f[u] - f[v]).powi(2)).sum()
    }

    pub fn is_connected(&self) -> bool {
        if self.num_vertices == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.num_vertices];
        for &(u, v, _) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.num_vertices];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.num_vertices
    }

    /// Vertices of the cells subdivided from top cell `top`.
    pub fn top_vertices(&self, top: usize) -> Vec<usize> {
        let set: BTreeSet<usize> =
            self.cells.iter().filter(|c| c.top == top).flat_map(|c| c.corners.iter().copied()).collect();
        set.into_iter().collect()
    }

    fn restricted_order(&self, keep: &[usize]) -> Ordering {
        match &self.ordering {
            Ordering::Reverse => Ordering::Reverse,
            Ordering::Natural => Ordering::Natural,
            _ => {
                let _ = keep;
                Ordering::MinimumDegree
            }
        }
    }

    /// Solves `K_II u = b_I` on the complement of `fixed` (where `u = 0`).
    pub fn grounded_solve(&self, fixed: &[bool], rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let keep: Vec<usize> = (0..self.num_vertices).filter(|&v| !fixed[v]).collect();
        if keep.is_empty() {
            return Ok(rhs.iter().map(|_| vec![0.0; self.num_vertices]).collect());
        }
        let k = self.stiffness().principal(&keep);
        let expand = |x: Vec<f64>| {
            let mut out = vec![0.0; self.num_vertices];
            for (i, &v) in keep.iter().enumerate() {
                out[v] = x[i];
            }
            out
        };
        let restrict = |b: &Vec<f64>| keep.iter().map(|&v| b[v]).collect::<Vec<f64>>();
        if keep.len() > DIRECT_SOLVE_CAP {
            return rhs.iter().map(|b| pcg(&k, &restrict(b), CG_RTOL, 20 * keep.len()).map(expand)).collect();
        }
        let sym = Symbolic::analyze(&k, &self.restricted_order(&keep))?;
        let f = Ldl::factor(&sym, &k).map_err(|p| {
            Error::IllPosedNetwork(format!(
                "grounded stiffness is singular at pivot {p}; is some component free of fixed vertices?"
            ))
        })?;
        Ok(rhs.iter().map(|b| expand(f.solve(&restrict(b)))).collect())
    }

    /// Effective resistance between two vertices.
    pub fn effective_resistance(&self, x: usize, y: usize) -> Result<f64> {
        if x >= self.num_vertices || y >= self.num_vertices {
            return Err(Error::Parameter("vertex out of range".into()));
        }
        if x == y {
            return Ok(0.0);
        }
        let mut fixed = vec![false; self.num_vertices];
        fixed[y] = true;
        let mut b = vec![0.0; self.num_vertices];
        b[x] = 1.0;
        Ok(self.grounded_solve(&fixed, &[b])?.remove(0)[x])
    }

    /// Resistances between all pairs of `points`.
    pub fn resistance_matrix(&self, points: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = points.len();
        if n < 2 {
            return Ok(vec![vec![0.0; n]; n]);
        }
        let y = points[0];
        let mut fixed = vec![false; self.num_vertices];
        fixed[y] = true;
        let rhs: Vec<Vec<f64>> = points[1..]
            .iter()
            .map(|&x| {
                let mut b = vec![0.0; self.num_vertices];
                b[x] = 1.0;
                b
            })
            .collect();
        let cols = self.grounded_solve(&fixed, &rhs)?;
        // G restricted to points[1..]; R(a,b) = G_aa + G_bb - 2 G_ab, R(a,y) = G_aa
        let g = |a: usize, b: usize| -> f64 {
            if a == 0 || b == 0 {
                0.0
            } else {
                cols[a - 1][points[b]]
            }
        };
        let mut r = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    r[a][b] = g(a, a) + g(b, b) - 2.0 * g(a, b);
                }
            }
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiameterReport {
    pub diameter: f64,
    pub pairs: usize,
    /// `2 N_sup / (1 - r_sup)`.
    pub bound: f64,
    pub within_bound: bool,
}

/// Largest resistance among the boundary and `samples` random vertices.
pub fn resistance_diameter(
    g: &PrefractalGraph,
    n_sup: usize,
    r_sup: f64,
    samples: usize,
    seed: u64,
) -> Result<DiameterReport> {
    let mut pts: BTreeSet<usize> = g.boundary().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples.min(g.num_vertices) {
        pts.insert(rng.gen_range(0..g.num_vertices));
    }
    let pts: Vec<usize> = pts.into_iter().collect();
    let r = g.resistance_matrix(&pts)?;
    let diameter = r.iter().flatten().cloned().fold(0.0, f64::max);
    let bound = 2.0 * n_sup as f64 / (1.0 - r_sup);
    Ok(DiameterReport { diameter, pairs: pts.len() * (pts.len() - 1) / 2, bound, within_bound: diameter <= bound })
}

/// Glued and disjoint cut graphs for `Λ_k`, plus the rescaled per-cell graphs.
#[derive(Debug, Clone)]
pub struct CutGraph {
    pub cut: CutSet,
    pub sub_depth: usize,
    pub glued: PrefractalGraph,
    pub disjoint: PrefractalGraph,
    pub pieces: Vec<CutPiece>,
    /// Distinct per-cell graphs; pieces point into this list.
    pub piece_graphs: Vec<PrefractalGraph>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutPiece {
    pub address: Vec<usize>,
    pub log_t: f64,
    pub log_mu: f64,
    pub graph: usize,
}

pub fn cut_graph(tree: &mut VTree, weights: &WeightSystem, k: usize, sub_depth: usize) -> Result<CutGraph> {
    let cut = crate::measures::cut_set(tree, weights, k)?;
    let tops: Vec<Vec<usize>> = cut.members.iter().map(|m| m.address.clone()).collect();
    let opts = GraphOptions::default();
    let glued = assemble(tree, weights, &tops, sub_depth, Layout::Glued, BoundarySpec::Global, &opts)?;
    let disjoint = assemble(tree, weights, &tops, sub_depth, Layout::Disjoint, BoundarySpec::TopCorners, &opts)?;
    let mut by_key: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut piece_graphs = Vec::new();
    let mut pieces = Vec::new();
    for m in &cut.members {
        let ty = tree.node_type(&m.address)?;
        let key = (m.address.len(), ty);
        let idx = match by_key.get(&key) {
            Some(&i) => i,
            None => {
                let mut sub = tree.subtree_at(&m.address)?;
                piece_graphs.push(build_graph(&mut sub, sub_depth, weights)?);
                by_key.insert(key, piece_graphs.len() - 1);
                piece_graphs.len() - 1
            }
        };
        pieces.push(CutPiece { address: m.address.clone(), log_t: m.log_t, log_mu: m.log_mu, graph: idx });
    }
    Ok(CutGraph { cut, sub_depth, glued, disjoint, pieces, piece_graphs })
}

/// Members of the cut sharing a vertex with each member.
pub fn cut_adjacency(tree: &mut VTree, weights: &WeightSystem, cut: &CutSet) -> Result<Vec<Vec<usize>>> {
    let ctx = MeasureContext::new(tree.family(), weights)?;
    let ex = Expander::new(tree, &ctx);
    let mut at: HashMap<VName, Vec<usize>> = HashMap::new();
    for (i, m) in cut.members.iter().enumerate() {
        for c in ex.descend(tree, &m.address)?.corners {
            at.entry(c).or_default().push(i);
        }
    }
    let mut adj = vec![BTreeSet::new(); cut.members.len()];
    for members in at.values() {
        for &a in members {
            for &b in members {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    Ok(adj.into_iter().map(|s| s.into_iter().collect()).collect())
}

/// The neighbourhood `D_i` of a cut member with its exit boundary.
#[derive(Debug, Clone)]
pub struct ExitRegion {
    pub member: usize,
    pub graph: PrefractalGraph,
    /// Vertices of the member cell `K_i` itself.
    pub inner: Vec<usize>,
}

/// `D_i`: the member and every member touching it, subdivided `sub_depth`
/// levels; the absorbing set is their corners other than those of `K_i`.
pub fn exit_region(
    tree: &mut VTree,
    weights: &WeightSystem,
    cut: &CutSet,
    adjacency: &[Vec<usize>],
    member: usize,
    sub_depth: usize,
) -> Result<ExitRegion> {
    let mut ids = vec![member];
    ids.extend(adjacency[member].iter().copied());
    let tops: Vec<Vec<usize>> = ids.iter().map(|&i| cut.members[i].address.clone()).collect();
    let boundary = BoundarySpec::CornersExcept { include: (0..tops.len()).collect(), exclude: vec![0] };
    let graph = assemble(tree, weights, &tops, sub_depth, Layout::Glued, boundary, &GraphOptions::default())?;
    let inner = graph.top_vertices(0);
    Ok(ExitRegion { member, graph, inner })
}

/// Expected exit times `E^x T_{absorbing}` for every vertex.
pub fn exit_times(g: &PrefractalGraph, absorbing: &[bool]) -> Result<Vec<f64>> {
    if !absorbing.iter().any(|&a| a) {
        return Err(Error::Precondition("exit times need a nonempty absorbing set".into()));
    }
    Ok(g.grounded_solve(absorbing, &[g.mass.clone()])?.remove(0))
}

/// `E^x T` for one start vertex (zero on the absorbing set).
pub fn mean_exit_time(g: &PrefractalGraph, absorbing: &[bool], x: usize) -> Result<f64> {
    Ok(exit_times(g, absorbing)?[x])
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitSample {
    pub times: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

impl ExitSample {
    /// Empirical `P(T <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.times.iter().filter(|&&s| s <= t).count() as f64 / self.times.len() as f64
    }
}

/// Continuous-time walk: from `x`, wait `Exp(c(x)/m(x))`, then jump to a
/// neighbour with probability proportional to its conductance.
pub fn simulate_walk_exit(
    g: &PrefractalGraph,
    absorbing: &[bool],
    x: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ExitSample> {
    if n_paths < 1 {
        return Err(Error::Parameter("n_paths must be at least 1".into()));
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); g.num_vertices];
    for &(u, v, c) in &g.edges {
        adj[u].push((v, c));
        adj[v].push((u, c));
    }
    let deg: Vec<f64> = adj.iter().map(|a| a.iter().map(|e| e.1).sum()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut v = x;
        let mut t = 0.0;
        let mut steps = 0u64;
        while !absorbing[v] {
            let rate = deg[v] / g.mass[v];
            let u: f64 = rng.gen::<f64>();
            t += -(1.0 - u).ln() / rate;
            let mut pick = rng.gen::<f64>() * deg[v];
            let mut next = adj[v].last().unwrap().0;
            for &(w, c) in &adj[v] {
                if pick < c {
                    next = w;
                    break;
                }
                pick -= c;
            }
            v = next;
            steps += 1;
            if steps > 1_000_000_000 {
                return Err(Error::IllPosedNetwork("walk does not reach the absorbing set".into()));
            }
        }
        times.push(t);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(ExitSample { times, mean, std_error: (var / n).sqrt() })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitRow {
    pub k: usize,
    pub address: Vec<usize>,
    /// `min_x E^x T / e^{-k}` over the vertices of `K_i`.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub walk_vertex: usize,
    pub solve_mean: f64,
    pub walk_mean: f64,
    pub walk_se: f64,
    /// `P(T <= c e^{-k})` at the report's `c`.
    pub hit_prob: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitTimeReport {
    pub rows: Vec<ExitRow>,
    pub b1: f64,
    pub b2: f64,
    pub band_ratio: f64,
    /// Fitted small constant for the hitting tail: `b1 / 4`.
    pub c: f64,
    pub max_hit_prob: f64,
    pub walks_agree: bool,
    pub passed: bool,
}

impl ExitTimeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,address,min_ratio,max_ratio,solve_mean,walk_mean,walk_se,hit_prob\n");
        for r in &self.rows {
            let addr: Vec<String> = r.address.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6}",
                r.k,
                if addr.is_empty() { "-".to_string() } else { addr.join(".") },
                r.min_ratio,
                r.max_ratio,
                r.solve_mean,
                r.walk_mean,
                r.walk_se,
                r.hit_prob
            );
        }
        out
    }
}

/// Mean exit times from `D_i` for `members_per_k` evenly spaced members of
/// each `Λ_k`, scaled by `e^{k}`, with a walk simulation from the vertex of
/// `K_i` that takes longest to leave.
pub fn exit_time_audit(
    tree: &mut VTree,
    weights: &WeightSystem,
    k_range: std::ops::RangeInclusive<usize>,
    sub_depth: usize,
    members_per_k: usize,
    walk_paths: usize,
    seed: u64,
) -> Result<ExitTimeReport> {
    if members_per_k == 0 {
        return Err(Error::Parameter("members_per_k must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for k in k_range {
        let cut = crate::measures::cut_set(tree, weights, k)?;
        let adj = cut_adjacency(tree, weights, &cut)?;
        let step = (cut.m_k / members_per_k).max(1);
        for (j, m) in (0..cut.m_k).step_by(step).take(members_per_k).enumerate() {
            let reg = exit_region(tree, weights, &cut, &adj, m, sub_depth)?;
            let times = exit_times(&reg.graph, &reg.graph.is_boundary)?;
            let scale = (k as f64).exp();
            let (mut lo, mut hi, mut arg) = (f64::INFINITY, 0.0f64, reg.inner[0]);
            for &x in &reg.inner {
                let r = times[x] * scale;
                lo = lo.min(r);
                if r > hi {
                    hi = r;
                    arg = x;
                }
            }
            let walk = simulate_walk_exit(
                &reg.graph,
                &reg.graph.is_boundary,
                arg,
                walk_paths,
                seed ^ ((k as u64) << 32 | j as u64),
            )?;
            samples.push((rows.len(), walk));
            rows.push(ExitRow {
                k,
                address: cut.members[m].address.clone(),
                min_ratio: lo,
                max_ratio: hi,
                walk_vertex: arg,
                solve_mean: times[arg],
                walk_mean: f64::NAN,
                walk_se: f64::NAN,
                hit_prob: f64::NAN,
            });
        }
    }
    let b1 = rows.iter().map(|r| r.min_ratio).fold(f64::INFINITY, f64::min);
    let b2 = rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    let c = b1 / 4.0;
    let mut walks_agree = true;
    for (i, w) in samples {
        let r = &mut rows[i];
        r.walk_mean = w.mean;
        r.walk_se = w.std_error;
        r.hit_prob = w.cdf(c * (-(r.k as f64)).exp());
        walks_agree &= (w.mean - r.solve_mean).abs() <= 3.0 * w.std_error;
    }
    let max_hit_prob = rows.iter().map(|r| r.hit_prob).fold(0.0, f64::max);
    let band_ratio = b2 / b1;
    Ok(ExitTimeReport {
        rows,
        b1,
        b2,
        band_ratio,
        c,
        max_hit_prob,
        walks_agree,
        passed: band_ratio < 100.0 && walks_agree,
    })
}

/// Edge list CSV `u,v,conductance`.
pub fn edges_csv(g: &PrefractalGraph) -> String {
    let mut out = String::from("u,v,conductance\n");
    for &(u, v, c) in &g.edges {
        let _ = writeln!(out, "{u},{v},{c:.17e}");
    }
    out
}

/// Vertex CSV `id,x,y,mass,is_boundary`.
pub fn vertices_csv(g: &PrefractalGraph) -> String {
    let mut out = String::from("id,x,y,mass,is_boundary\n");
    for v in 0..g.num_vertices {
        let (x, y) = g.coords.as_ref().map(|c| (c[v][0], c[v][1])).unwrap_or((f64::NAN, f64::NAN));
        let _ = writeln!(out, "{v},{x:.17e},{y:.17e},{:.17e},{}", g.mass[v], g.is_boundary[v] as u8);
    }
    out
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')).skip(1)
}

/// Reads a graph back from its two CSV files.
pub fn graph_from_csv(vertices: &str, edges: &str) -> Result<PrefractalGraph> {
    let bad = |n: usize, what: &str| Error::Parse(format!("line {}: {what}", n + 1));
    let mut rows = Vec::new();
    for (n, line) in data_lines(vertices) {
        let f: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if f.len() != 5 {
            return Err(bad(n, "expected id,x,y,mass,is_boundary"));
        }
        let id: usize = f[0].parse().map_err(|_| bad(n, "bad id"))?;
        let x: f64 = f[1].parse().map_err(|_| bad(n, "bad x"))?;
        let y: f64 = f[2].parse().map_err(|_| bad(n, "bad y"))?;
        let m: f64 = f[3].parse().map_err(|_| bad(n, "bad mass"))?;
        let b = match f[4] {
            "0" | "false" => false,
            "1" | "true" => true,
            _ => return Err(bad(n, "bad is_boundary")),
        };
        rows.push((id, x, y, m, b));
    }
    let nv = rows.len();
    let mut mass = vec![0.0; nv];
    let mut is_boundary = vec![false; nv];
    let mut coords = vec![[0.0; 2]; nv];
    let mut seen = vec![false; nv];
    for (id, x, y, m, b) in rows {
        if id >= nv || std::mem::replace(&mut seen[id], true) {
            return Err(Error::Parse(format!("vertex ids must be 0..{nv} without repeats")));
        }
        if !(m > 0.0) {
            return Err(Error::Parse(format!("vertex {id}: mass must be positive")));
        }
        mass[id] = m;
        is_boundary[id] = b;
        coords[id] = [x, y];
    }
    let mut list = Vec::new();
    for (n, line) in data_lines(edges) {
        let f: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if f.len() != 3 {
            return Err(bad(n, "expected u,v,conductance"));
        }
        let u: usize = f[0].parse().map_err(|_| bad(n, "bad u"))?;
        let v: usize = f[1].parse().map_err(|_| bad(n, "bad v"))?;
        let c: f64 = f[2].parse().map_err(|_| bad(n, "bad conductance"))?;
        if u >= nv || v >= nv || u == v || !(c > 0.0) {
            return Err(bad(n, "edge endpoints or conductance invalid"));
        }
        list.push((u, v, c));
    }
    let has_coords = coords.iter().all(|c| c[0].is_finite() && c[1].is_finite());
    Ok(PrefractalGraph {
        num_vertices: nv,
        edges: list,
        mass,
        is_boundary,
        coords: has_coords.then_some(coords),
        names: None,
        cells: Vec::new(),
        tops: Vec::new(),
        top_corners: Vec::new(),
        ordering: Ordering::MinimumDegree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::{make_interpolating, make_sg, FamilySpec, Rational};
    use std::sync::Arc;

    fn sg(level: u32) -> Arc<FamilySpec> {
        Arc::new(FamilySpec::single(make_sg(level).unwrap()))
    }
    fn mixed() -> Arc<FamilySpec> {
        Arc::new(FamilySpec::new(vec![(make_sg(2).unwrap(), 0.5), (make_sg(3).unwrap(), 0.5)]).unwrap())
    }

    #[test]
    fn sg2_depth_one() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let g = build_graph(&mut t, 1, &WeightSystem::Unit).unwrap();
        assert_eq!(g.num_vertices, 6);
        assert_eq!(g.edges.len(), 9);
        assert!(g.edges.iter().all(|e| (e.2 - 5.0 / 3.0).abs() < 1e-15));
        for v in 0..6 {
            let expected = if g.is_boundary[v] { 1.0 / 9.0 } else { 2.0 / 9.0 };
            assert!((g.mass[v] - expected).abs() < 1e-15);
        }
        assert_eq!(g.boundary().len(), 3);
    }

    #[test]
    fn sg2_vertex_counts_and_mass() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        for n in 0..=6u32 {
            let g = build_graph(&mut t, n as usize, &WeightSystem::Unit).unwrap();
            assert_eq!(g.num_vertices, (3usize.pow(n + 1) + 3) / 2);
            assert_eq!(g.edges.len(), 3 * 3usize.pow(n));
            assert!((g.total_mass() - 1.0).abs() < 1e-12);
            assert!(g.is_connected());
        }
    }

    #[test]
    fn corner_resistance_is_two_thirds() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        for n in 0..=7 {
            let g = build_graph(&mut t, n, &WeightSystem::Unit).unwrap();
            let b = g.boundary();
            let r = g.effective_resistance(b[0], b[1]).unwrap();
            assert!((r - 2.0 / 3.0).abs() < 1e-10, "depth {n}: {r}");
        }
        for fam in [sg(3), Arc::new(FamilySpec::single(make_interpolating(Rational::new(2, 5)).unwrap())), mixed()] {
            let mut t = VTree::new(fam, 1, 4).unwrap();
            let g = build_graph(&mut t, 3, &WeightSystem::Unit).unwrap();
            let r = g.resistance_matrix(&g.boundary()).unwrap();
            assert!((r[0][1] - 2.0 / 3.0).abs() < 1e-10 && (r[1][2] - 2.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn resistance_is_a_metric() {
        let mut t = VTree::new(mixed(), 2, 1).unwrap().with_forced_necks([3]);
        let g = build_graph(&mut t, 3, &WeightSystem::Unit).unwrap();
        let pts: Vec<usize> = (0..g.num_vertices).step_by(7).collect();
        let r = g.resistance_matrix(&pts).unwrap();
        for a in 0..pts.len() {
            for b in 0..pts.len() {
                assert!((r[a][b] - r[b][a]).abs() < 1e-12);
                for c in 0..pts.len() {
                    assert!(r[a][c] <= r[a][b] + r[b][c] + 1e-12);
                }
            }
        }
        let direct = g.effective_resistance(pts[2], pts[3]).unwrap();
        assert!((direct - r[2][3]).abs() < 1e-10);
    }

    #[test]
    fn cell_resistance_bound() {
        let mut t = VTree::new(mixed(), 1, 2).unwrap();
        let g = build_graph(&mut t, 4, &WeightSystem::Unit).unwrap();
        for c in g.cells.iter().step_by(17) {
            let r = g.effective_resistance(c.corners[0], c.corners[1]).unwrap();
            assert!(r <= (-c.log_rho).exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn quadratic_form_identity() {
        let mut t = VTree::new(mixed(), 2, 9).unwrap().with_forced_necks([4]);
        let g = build_graph(&mut t, 3, &WeightSystem::Unit).unwrap();
        let k = g.stiffness();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let f: Vec<f64> = (0..g.num_vertices).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let by_cell: f64 = g
                .cells
                .iter()
                .map(|c| {
                    let rho = c.log_rho.exp();
                    let v = &c.corners;
                    rho * ((f[v[0]] - f[v[1]]).powi(2) + (f[v[1]] - f[v[2]]).powi(2) + (f[v[0]] - f[v[2]]).powi(2))
                })
                .sum();
            let q = k.quad_form(&f);
            assert!(((q - by_cell) / by_cell).abs() < 1e-12);
        }
    }

    #[test]
    fn diameter_bounds() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let g0 = build_graph(&mut t, 0, &WeightSystem::Unit).unwrap();
        let d0 = resistance_diameter(&g0, 3, 0.6, 0, 0).unwrap();
        assert!((d0.diameter - 2.0 / 3.0).abs() < 1e-12);
        let mut prev = 0.0;
        for n in 1..=5 {
            let g = build_graph(&mut t, n, &WeightSystem::Unit).unwrap();
            // the full vertex set of the coarser graph is a subset of the finer one
            let d = resistance_diameter(&g, 3, 0.6, g.num_vertices, 0).unwrap();
            assert!(d.within_bound && (d.bound - 15.0).abs() < 1e-12);
            assert!(d.diameter >= prev - 1e-12);
            prev = d.diameter;
        }
    }

    #[test]
    fn triangle_exit_time() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let g = build_graph(&mut t, 0, &WeightSystem::Unit).unwrap();
        let absorbing = vec![false, true, true];
        let e = mean_exit_time(&g, &absorbing, 0).unwrap();
        assert!((e - g.mass[0] / 2.0).abs() < 1e-15);
        assert_eq!(mean_exit_time(&g, &absorbing, 1).unwrap(), 0.0);
        let s = simulate_walk_exit(&g, &absorbing, 0, 10_000, 1).unwrap();
        assert!((s.mean - e).abs() < 3.0 * s.std_error);
        assert_eq!(s.cdf(0.0), 0.0);
        assert!(simulate_walk_exit(&g, &absorbing, 0, 0, 1).is_err());
    }

    #[test]
    fn exit_region_domain_monotonicity() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let w = WeightSystem::Unit;
        let cut = crate::measures::cut_set(&mut t, &w, 4).unwrap();
        let adj = cut_adjacency(&mut t, &w, &cut).unwrap();
        for m in [0, 5, cut.m_k - 1] {
            let reg = exit_region(&mut t, &w, &cut, &adj, m, 2).unwrap();
            let big = exit_times(&reg.graph, &reg.graph.is_boundary).unwrap();
            // K_i alone, absorbing at its own corners
            let kcorners: HashSet<usize> = reg.graph.top_corners[0].iter().copied().collect();
            let small_abs: Vec<bool> =
                (0..reg.graph.num_vertices).map(|v| reg.graph.is_boundary[v] || kcorners.contains(&v)).collect();
            let small = exit_times(&reg.graph, &small_abs).unwrap();
            for &v in &reg.inner {
                assert!(big[v] >= small[v] - 1e-15);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut t = VTree::new(mixed(), 1, 3).unwrap();
        let g = build_graph(&mut t, 2, &WeightSystem::Unit).unwrap();
        let h = graph_from_csv(&vertices_csv(&g), &edges_csv(&g)).unwrap();
        assert_eq!(h.num_vertices, g.num_vertices);
        assert_eq!(h.edges, g.edges);
        assert_eq!(h.mass, g.mass);
        assert_eq!(h.is_boundary, g.is_boundary);
        let b = h.boundary();
        assert!((h.effective_resistance(b[0], b[2]).unwrap() - 2.0 / 3.0).abs() < 1e-10);
        assert!(graph_from_csv("id,x,y,mass,is_boundary\n0,0,0,1,2\n", "u,v,conductance\n").is_err());
    }

    #[test]
    fn cut_graph_pieces_share_graphs() {
        let mut t = VTree::new(sg(2), 1, 0).unwrap();
        let cg = cut_graph(&mut t, &WeightSystem::Unit, 3, 2).unwrap();
        assert_eq!(cg.piece_graphs.len(), 1);
        assert_eq!(cg.pieces.len(), cg.cut.m_k);
        assert!((cg.glued.total_mass() - 1.0).abs() < 1e-12);
        assert!((cg.disjoint.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(cg.disjoint.boundary().len(), 3 * cg.cut.m_k);
    }
}
