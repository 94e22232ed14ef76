//! Sparse symmetric matrices, an unpivoted sparse LDLᵀ (up-looking, with an
//! elimination-tree symbolic phase), inertia counting, and Jacobi-PCG.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric matrix stored as full adjacency rows (diagonal included).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SymMatrix {
    /// Assembles from `(i, j, v)` entries; each off-diagonal entry is given
    /// once and mirrored, duplicates are summed.
    pub fn from_triplets(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in entries {
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(r.len());
            for &(j, v) in r.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += v,
                    _ => merged.push((j, v)),
                }
            }
            *r = merged;
        }
        Self { n, rows }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].binary_search_by_key(&j, |e| e.0).map(|k| self.rows[i][k].1).unwrap_or(0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().flatten().map(|e| e.1.abs()).fold(0.0, f64::max)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `self - λ·diag(m)`.
    pub fn shifted(&self, lambda: f64, mass: &[f64]) -> SymMatrix {
        let mut out = self.clone();
        for (i, r) in out.rows.iter_mut().enumerate() {
            match r.binary_search_by_key(&i, |e| e.0) {
                Ok(k) => r[k].1 -= lambda * mass[i],
                Err(k) => r.insert(k, (i, -lambda * mass[i])),
            }
        }
        out
    }

    /// Principal submatrix on `keep` (in that order).
    pub fn principal(&self, keep: &[usize]) -> SymMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let rows = keep
            .iter()
            .map(|&old| {
                let mut r: Vec<(usize, f64)> =
                    self.rows[old].iter().filter(|e| map[e.0] != usize::MAX).map(|&(j, v)| (map[j], v)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        SymMatrix { n: keep.len(), rows }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Elimination order for the factorization.
#[derive(Debug, Clone, PartialEq)]
pub enum Ordering {
    Natural,
    /// Highest index first.
    Reverse,
    MinimumDegree,
    Given(Vec<usize>),
}

/// Greedy minimum-degree order on the explicit elimination graph.
pub fn minimum_degree(a: &SymMatrix) -> Vec<usize> {
    let n = a.n();
    let mut adj: Vec<BTreeSet<usize>> =
        (0..n).map(|i| a.row(i).iter().map(|e| e.0).filter(|&j| j != i).collect()).collect();
    let mut heap: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some((_, v)) = heap.pop_first() {
        done[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !done[u]).collect();
        for &u in &nbrs {
            heap.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            heap.insert((adj[u].len(), u));
        }
        adj[v].clear();
    }
    order
}

fn resolve_order(a: &SymMatrix, ordering: &Ordering) -> Result<Vec<usize>> {
    let n = a.n();
    let p = match ordering {
        Ordering::Natural => (0..n).collect(),
        Ordering::Reverse => (0..n).rev().collect(),
        Ordering::MinimumDegree => minimum_degree(a),
        Ordering::Given(p) => p.clone(),
    };
    let mut seen = vec![false; n];
    if p.len() != n || p.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Parameter("ordering is not a permutation".into()));
    }
    Ok(p)
}

/// Symbolic analysis, reusable for every matrix with the same pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    /// Upper-triangular permuted pattern, CSC.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// `src[p]`: (row, position) of the entry in the source matrix.
    src: Vec<(usize, usize)>,
    parent: Vec<usize>,
    lp: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Symbolic {
    pub fn analyze(a: &SymMatrix, ordering: &Ordering) -> Result<Self> {
        let n = a.n();
        let perm = resolve_order(a, ordering)?;
        let mut pinv = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            pinv[i] = k;
        }
        // permuted upper triangle: column k holds rows i <= k
        let mut cols: Vec<Vec<(usize, (usize, usize))>> = vec![Vec::new(); n];
        for (i, row) in a.rows.iter().enumerate() {
            for (pos, &(j, _)) in row.iter().enumerate() {
                let (pi, pj) = (pinv[i], pinv[j]);
                if pi <= pj {
                    cols[pj].push((pi, (i, pos)));
                }
            }
        }
        let mut ap = Vec::with_capacity(n + 1);
        let mut ai = Vec::new();
        let mut src = Vec::new();
        ap.push(0);
        for c in cols.iter_mut() {
            c.sort_by_key(|e| e.0);
            for &(r, s) in c.iter() {
                ai.push(r);
                src.push(s);
            }
            ap.push(ai.len());
        }
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        Ok(Self { n, perm, ap, ai, src, parent, lp })
    }

    /// Nonzeros of `L` below the diagonal.
    pub fn fill(&self) -> usize {
        self.lp[self.n]
    }
}

/// Outcome of a numeric factorization.
#[derive(Debug, Clone)]
pub struct Ldl {
    sym_perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl Ldl {
    /// Factorizes `a`, whose pattern must match the analysis. Returns
    /// `Err(k)` with the pivot index when pivot `k` is exactly zero.
    pub fn factor(sym: &Symbolic, a: &SymMatrix) -> std::result::Result<Self, usize> {
        let n = sym.n;
        let mut lnz = vec![0usize; n];
        let mut li = vec![0usize; sym.fill()];
        let mut lx = vec![0.0; sym.fill()];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![NONE; n];
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in sym.ap[k]..sym.ap[k + 1] {
                let mut i = sym.ai[p];
                let (r, pos) = sym.src[p];
                y[i] += a.rows[r][pos].1;
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = sym.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p2 = sym.lp[i] + lnz[i];
                for p in sym.lp[i]..p2 {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[p2] = k;
                lx[p2] = l_ki;
                lnz[i] += 1;
            }
            if d[k] == 0.0 {
                return Err(k);
            }
        }
        Ok(Self { sym_perm: sym.perm.clone(), lp: sym.lp.clone(), li, lx, d })
    }

    pub fn pivots(&self) -> &[f64] {
        &self.d
    }

    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&x| x < 0.0).count()
    }

    /// Original index eliminated at each step.
    pub fn perm(&self) -> &[usize] {
        &self.sym_perm
    }

    pub fn min_abs_pivot(&self) -> f64 {
        self.d.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut x: Vec<f64> = self.sym_perm.iter().map(|&i| b[i]).collect();
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * x[self.li[p]];
            }
            x[j] = s;
        }
        let mut out = vec![0.0; n];
        for (k, &i) in self.sym_perm.iter().enumerate() {
            out[i] = x[k];
        }
        out
    }
}

/// Above this size, SPD solves use Jacobi-PCG instead of a direct factorization.
pub const DIRECT_SOLVE_CAP: usize = 200_000;
pub const CG_RTOL: f64 = 1e-10;

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn pcg(a: &SymMatrix, b: &[f64], rtol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.n();
    let dinv: Vec<f64> = (0..n).map(|i| 1.0 / a.get(i, i)).collect();
    let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        let ap = a.matvec(&p);
        let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if r.iter().map(|x| x * x).sum::<f64>().sqrt() <= rtol * bnorm {
            return Ok(x);
        }
        z = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NumericalDegeneracy { lambda: 0.0, detail: format!("CG did not reach {rtol} in {max_iter} iterations") })
}

/// Solves an SPD system, directly below [`DIRECT_SOLVE_CAP`] and by PCG above.
pub fn solve_spd(a: &SymMatrix, b: &[f64], ordering: &Ordering) -> Result<Vec<f64>> {
    if a.n() > DIRECT_SOLVE_CAP {
        return pcg(a, b, CG_RTOL, 20 * a.n());
    }
    let sym = Symbolic::analyze(a, ordering)?;
    let f = Ldl::factor(&sym, a)
        .map_err(|k| Error::NumericalDegeneracy { lambda: 0.0, detail: format!("zero pivot {k} in an SPD solve") })?;
    Ok(f.solve(b))
}

/// Generalized eigenvalues of `(k, diag(m))`, ascending, with mass-orthonormal
/// eigenvectors as columns.
pub fn dense_generalized_eigen(k: &SymMatrix, mass: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = k.n();
    let s: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = k.to_dense();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= s[i] * s[j];
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        let col: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        for r in 0..n {
            vecs[(r, c)] = col[r] * s[r];
        }
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> SymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.2) {
                    let c: f64 = rng.gen_range(0.1..2.0);
                    t.push((i, j, -c));
                    t.push((i, i, c));
                    t.push((j, j, c));
                }
            }
            t.push((i, i, 0.5));
        }
        SymMatrix::from_triplets(n, t)
    }

    #[test]
    fn assembly_merges_duplicates() {
        let a = SymMatrix::from_triplets(2, [(0, 1, 1.0), (1, 0, 2.0), (0, 0, 1.0)]);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn ldl_solves_in_every_ordering() {
        let a = random_spd(40, 1);
        let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        for ord in [Ordering::Natural, Ordering::Reverse, Ordering::MinimumDegree] {
            let x = solve_spd(&a, &b, &ord).unwrap();
            let r = a.matvec(&x);
            assert!(r.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10), "{ord:?}");
        }
        let x = pcg(&a, &b, 1e-12, 1000).unwrap();
        assert!(a.matvec(&x).iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn inertia_matches_dense_spectrum() {
        let a = random_spd(30, 2);
        let mass: Vec<f64> = (0..30).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
        let (vals, vecs) = dense_generalized_eigen(&a, &mass);
        let sym = Symbolic::analyze(&a, &Ordering::MinimumDegree).unwrap();
        for k in 0..vals.len() - 1 {
            let lam = 0.5 * (vals[k] + vals[k + 1]);
            let f = Ldl::factor(&sym, &a.shifted(lam, &mass)).unwrap();
            assert_eq!(f.negative_pivots(), k + 1);
        }
        // M-orthonormality
        for c in 0..3 {
            let norm: f64 = (0..30).map(|r| vecs[(r, c)].powi(2) * mass[r]).sum();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn minimum_degree_is_permutation() {
        let a = random_spd(25, 3);
        let mut p = minimum_degree(&a);
        p.sort();
        assert_eq!(p, (0..25).collect::<Vec<_>>());
        assert!(resolve_order(&a, &Ordering::Given(vec![0; 25])).is_err());
    }

    #[test]
    fn zero_pivot_is_reported() {
        let a = SymMatrix::from_triplets(2, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]);
        let sym = Symbolic::analyze(&a, &Ordering::Natural).unwrap();
        assert_eq!(Ldl::factor(&sym, &a).unwrap_err(), 1);
    }
}
