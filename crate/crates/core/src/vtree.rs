//! Lazily expanded V-variable trees.
//!
//! Stage `n` of the construction uses environment `E^n`: it fixes the IFS of
//! every level `n-1` node (by type) and the types of the level `n` nodes.
//! `envs[n-1]` holds `E^n`. Nodes are addresses (0-based digit lists) and are
//! never materialized as a full tree. Types are 0-based internally and
//! 1-based in text dumps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ifs::FamilySpec;
use crate::rng::substream;

/// Default cap on realized levels.
pub const DEFAULT_LEVEL_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvEntry {
    pub ifs: usize,
    pub child_types: Vec<u16>,
}

/// One environment: an IFS and a child-type sequence for each of the `V` types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    pub entries: Vec<EnvEntry>,
}

impl Environment {
    /// All type labels equal.
    pub fn is_neck(&self) -> bool {
        let first = self.entries.iter().flat_map(|e| e.child_types.iter()).next();
        match first {
            Some(&t) => self.entries.iter().all(|e| e.child_types.iter().all(|&c| c == t)),
            None => true,
        }
    }

    pub fn num_types(&self) -> usize {
        self.entries.len()
    }
}

fn pick_ifs<R: Rng + ?Sized>(family: &FamilySpec, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let probs = family.probabilities();
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // roundoff in the cumulative sum: last member with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws one environment: i.i.d. `P`-distributed IFSs and i.i.d. uniform
/// child types.
pub fn sample_environment<R: Rng + ?Sized>(family: &FamilySpec, v: usize, rng: &mut R) -> Result<Environment> {
    if v < 1 || v > u16::MAX as usize {
        return Err(Error::Parameter(format!("V = {v} must lie in 1..=65535")));
    }
    let entries = (0..v)
        .map(|_| {
            let ifs = pick_ifs(family, rng);
            let n = family.members()[ifs].num_maps();
            let child_types = (0..n).map(|_| rng.gen_range(0..v) as u16).collect();
            EnvEntry { ifs, child_types }
        })
        .collect();
    Ok(Environment { entries })
}

/// Neck environment conditioned by drawing one uniform type and broadcasting it.
fn sample_forced_neck<R: Rng + ?Sized>(family: &FamilySpec, v: usize, rng: &mut R) -> Environment {
    let ifs: Vec<usize> = (0..v).map(|_| pick_ifs(family, rng)).collect();
    let t = rng.gen_range(0..v) as u16;
    let entries =
        ifs.into_iter().map(|ifs| EnvEntry { ifs, child_types: vec![t; family.members()[ifs].num_maps()] }).collect();
    Environment { entries }
}

/// Exact per-level neck probability `V·(Σ_F P(F)·V^{-N^F})^V`.
pub fn neck_probability(family: &FamilySpec, v: usize) -> f64 {
    let vf = v as f64;
    let inner: f64 =
        family.members().iter().zip(family.probabilities()).map(|(m, p)| p * vf.powi(-(m.num_maps() as i32))).sum();
    vf * inner.powi(v as i32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    Sampled { seed: u64, replica: u64 },
    Fixed,
}

/// A V-variable labelled tree, expanded on demand.
#[derive(Debug, Clone)]
pub struct VTree {
    family: Arc<FamilySpec>,
    v: usize,
    source: Source,
    /// Global level of this tree's root (nonzero for subtrees).
    base_level: usize,
    root_type: u16,
    envs: Vec<Environment>,
    forced: Arc<BTreeSet<usize>>,
    level_cap: usize,
    necks: Vec<usize>,
    scanned: usize,
}

impl VTree {
    pub fn new(family: Arc<FamilySpec>, v: usize, seed: u64) -> Result<Self> {
        Self::with_replica(family, v, seed, 0)
    }

    /// Tree number `replica` of the stream family keyed by `seed`.
    pub fn with_replica(family: Arc<FamilySpec>, v: usize, seed: u64, replica: u64) -> Result<Self> {
        if v < 1 || v > u16::MAX as usize {
            return Err(Error::Parameter(format!("V = {v} must lie in 1..=65535")));
        }
        let root_type = substream(seed, replica, 0).gen_range(0..v) as u16;
        Ok(Self {
            family,
            v,
            source: Source::Sampled { seed, replica },
            base_level: 0,
            root_type,
            envs: Vec::new(),
            forced: Arc::new(BTreeSet::new()),
            level_cap: DEFAULT_LEVEL_CAP,
            necks: Vec::new(),
            scanned: 0,
        })
    }

    /// Pins the given (1-based) levels to be necks by conditioned sampling.
    pub fn with_forced_necks(mut self, levels: impl IntoIterator<Item = usize>) -> Self {
        self.forced = Arc::new(levels.into_iter().filter(|&l| l >= 1).collect());
        self.envs.clear();
        self.necks.clear();
        self.scanned = 0;
        self
    }

    pub fn with_level_cap(mut self, cap: usize) -> Self {
        self.level_cap = cap;
        self
    }

    /// Tree with a fixed environment sequence; it cannot be extended.
    pub fn from_environments(family: Arc<FamilySpec>, root_type: usize, envs: Vec<Environment>) -> Result<Self> {
        let v = envs.first().map(|e| e.num_types()).unwrap_or(root_type + 1);
        if root_type >= v {
            return Err(Error::Parameter("root type out of range".into()));
        }
        for (n, e) in envs.iter().enumerate() {
            if e.num_types() != v {
                return Err(Error::Parse(format!("level {}: expected {v} entries", n + 1)));
            }
            for entry in &e.entries {
                let m = family
                    .members()
                    .get(entry.ifs)
                    .ok_or_else(|| Error::Parse(format!("level {}: unknown ifs {}", n + 1, entry.ifs)))?;
                if entry.child_types.len() != m.num_maps() || entry.child_types.iter().any(|&t| t as usize >= v) {
                    return Err(Error::Parse(format!("level {}: malformed child types", n + 1)));
                }
            }
        }
        Ok(Self {
            family,
            v,
            source: Source::Fixed,
            base_level: 0,
            root_type: root_type as u16,
            envs,
            forced: Arc::new(BTreeSet::new()),
            level_cap: DEFAULT_LEVEL_CAP,
            necks: Vec::new(),
            scanned: 0,
        })
    }

    pub fn family(&self) -> &FamilySpec {
        &self.family
    }
    pub fn family_arc(&self) -> &Arc<FamilySpec> {
        &self.family
    }
    pub fn v(&self) -> usize {
        self.v
    }
    pub fn root_type(&self) -> usize {
        self.root_type as usize
    }
    pub fn base_level(&self) -> usize {
        self.base_level
    }
    /// Number of environments realized so far.
    pub fn realized_depth(&self) -> usize {
        self.envs.len()
    }
    /// True when some levels were conditioned to be necks.
    pub fn is_conditioned(&self) -> bool {
        !self.forced.is_empty()
    }

    /// Extends the environment sequence to `depth` stages.
    pub fn realize(&mut self, depth: usize) -> Result<()> {
        if depth > self.level_cap {
            return Err(Error::CapExceeded { cap: self.level_cap });
        }
        while self.envs.len() < depth {
            let global = self.base_level + self.envs.len() + 1;
            let env = match self.source {
                Source::Fixed => return Err(Error::CapExceeded { cap: self.envs.len() }),
                Source::Sampled { seed, replica } => {
                    let mut rng = substream(seed, replica, global as u64);
                    if self.forced.contains(&global) {
                        sample_forced_neck(&self.family, self.v, &mut rng)
                    } else {
                        sample_environment(&self.family, self.v, &mut rng)?
                    }
                }
            };
            self.envs.push(env);
        }
        Ok(())
    }

    /// Environment `E^stage` (1-based); must be realized.
    pub fn env(&self, stage: usize) -> &Environment {
        &self.envs[stage - 1]
    }

    pub fn envs(&self) -> &[Environment] {
        &self.envs
    }

    pub fn is_neck(&mut self, level: usize) -> Result<bool> {
        if level == 0 {
            return Ok(true);
        }
        self.realize(level)?;
        Ok(self.envs[level - 1].is_neck())
    }

    /// Type of the node at `addr`.
    pub fn node_type(&mut self, addr: &[usize]) -> Result<usize> {
        self.realize(addr.len())?;
        self.node_type_realized(addr)
    }

    /// As [`node_type`](Self::node_type) on an already realized prefix.
    pub fn node_type_realized(&self, addr: &[usize]) -> Result<usize> {
        let mut t = self.root_type as usize;
        for (m, &digit) in addr.iter().enumerate() {
            let entry = self
                .envs
                .get(m)
                .ok_or_else(|| Error::InvalidAddress(format!("level {} not realized", m + 1)))?
                .entries
                .get(t)
                .expect("types are always < V");
            t = *entry.child_types.get(digit).ok_or_else(|| {
                Error::InvalidAddress(format!(
                    "digit {digit} at level {} exceeds branching number {}",
                    m + 1,
                    entry.child_types.len()
                ))
            })? as usize;
        }
        Ok(t)
    }

    /// IFS index assigned to the node at `addr`.
    pub fn ifs_at(&mut self, addr: &[usize]) -> Result<usize> {
        let t = self.node_type(addr)?;
        self.realize(addr.len() + 1)?;
        Ok(self.envs[addr.len()].entries[t].ifs)
    }

    /// Levels `n(1) < … < n(count)` of the first `count` necks.
    pub fn neck_levels(&mut self, count: usize) -> Result<Vec<usize>> {
        while self.necks.len() < count {
            let level = self.scanned + 1;
            if self.is_neck(level)? {
                self.necks.push(level);
            }
            self.scanned = level;
        }
        Ok(self.necks[..count].to_vec())
    }

    /// Necks found among the first `depth` levels (realizing them).
    pub fn necks_up_to(&mut self, depth: usize) -> Result<Vec<usize>> {
        self.realize(depth)?;
        while self.scanned < depth {
            let level = self.scanned + 1;
            if self.envs[level - 1].is_neck() {
                self.necks.push(level);
            }
            self.scanned = level;
        }
        Ok(self.necks.iter().copied().filter(|&n| n <= depth).collect())
    }

    /// First neck level `>= level` (level 0 counts as a neck).
    pub fn next_neck_at_or_after(&mut self, level: usize) -> Result<usize> {
        if level == 0 {
            return Ok(0);
        }
        let mut n = level;
        loop {
            if self.is_neck(n)? {
                return Ok(n);
            }
            n += 1;
        }
    }

    /// The transfer `σ^addr T`: the subtree rooted at `addr` with its own
    /// environment tail.
    pub fn subtree_at(&mut self, addr: &[usize]) -> Result<VTree> {
        let t = self.node_type(addr)?;
        let k = addr.len();
        Ok(VTree {
            family: self.family.clone(),
            v: self.v,
            source: self.source.clone(),
            base_level: self.base_level + k,
            root_type: t as u16,
            envs: self.envs[k..].to_vec(),
            forced: self.forced.clone(),
            level_cap: self.level_cap.saturating_sub(k),
            necks: Vec::new(),
            scanned: 0,
        })
    }

    /// Line-oriented dump: a header comment, then
    /// `level n: neck=<0|1> entries=[(ifs,[types]),...]`.
    pub fn dump(&self) -> String {
        let mut out = format!("# V={} root_type={}\n", self.v, self.root_type + 1);
        for (n, env) in self.envs.iter().enumerate() {
            let _ = write!(out, "level {}: neck={} entries=[", n + 1, env.is_neck() as u8);
            for (k, e) in env.entries.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let types: Vec<String> = e.child_types.iter().map(|t| (t + 1).to_string()).collect();
                let _ = write!(out, "({},[{}])", e.ifs, types.join(","));
            }
            out.push_str("]\n");
        }
        out
    }

    /// Inverse of [`dump`](Self::dump).
    pub fn from_dump(family: Arc<FamilySpec>, text: &str) -> Result<VTree> {
        let mut root_type = None;
        let mut envs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(header) = line.strip_prefix('#') {
                for tok in header.split_whitespace() {
                    if let Some(r) = tok.strip_prefix("root_type=") {
                        let r: usize = r.parse().map_err(|_| Error::Parse("bad root_type".into()))?;
                        root_type = Some(r.checked_sub(1).ok_or_else(|| Error::Parse("types are 1-based".into()))?);
                    }
                }
                continue;
            }
            envs.push(parse_level_line(line, envs.len() + 1)?);
        }
        let root_type = root_type.ok_or_else(|| Error::Parse("missing root_type header".into()))?;
        VTree::from_environments(family, root_type, envs)
    }

    /// All `(address, type)` pairs at `level` (exponential; test-scale only).
    pub fn nodes_at(&mut self, level: usize) -> Result<Vec<(Vec<usize>, usize)>> {
        self.realize(level)?;
        let mut frontier = vec![(Vec::new(), self.root_type as usize)];
        for m in 0..level {
            let env = &self.envs[m];
            let mut next = Vec::new();
            for (addr, t) in frontier {
                for (d, &c) in env.entries[t].child_types.iter().enumerate() {
                    let mut a = addr.clone();
                    a.push(d);
                    next.push((a, c as usize));
                }
            }
            frontier = next;
        }
        Ok(frontier)
    }

    /// Deep comparison of the labelled trees (IFS and branching at every
    /// node) down to `depth` levels.
    pub fn same_labelled_tree(a: &mut VTree, b: &mut VTree, depth: usize) -> Result<bool> {
        a.realize(depth + 1)?;
        b.realize(depth + 1)?;
        let mut fa = vec![a.root_type as usize];
        let mut fb = vec![b.root_type as usize];
        for m in 0..=depth {
            let (ea, eb) = (&a.envs[m], &b.envs[m]);
            let mut na = Vec::new();
            let mut nb = Vec::new();
            for (&ta, &tb) in fa.iter().zip(&fb) {
                let (xa, xb) = (&ea.entries[ta], &eb.entries[tb]);
                if xa.ifs != xb.ifs || xa.child_types.len() != xb.child_types.len() {
                    return Ok(false);
                }
                if m < depth {
                    na.extend(xa.child_types.iter().map(|&t| t as usize));
                    nb.extend(xb.child_types.iter().map(|&t| t as usize));
                }
            }
            fa = na;
            fb = nb;
        }
        Ok(true)
    }
}

fn parse_level_line(line: &str, expected: usize) -> Result<Environment> {
    let bad = |msg: &str| Error::Parse(format!("{msg}: {line:?}"));
    let rest = line.strip_prefix("level ").ok_or_else(|| bad("missing level prefix"))?;
    let (num, rest) = rest.split_once(':').ok_or_else(|| bad("missing colon"))?;
    let n: usize = num.trim().parse().map_err(|_| bad("bad level number"))?;
    if n != expected {
        return Err(bad("levels out of order"));
    }
    let rest = rest.trim();
    let (neck, rest) = rest.split_once(' ').ok_or_else(|| bad("missing entries"))?;
    let neck_flag = match neck {
        "neck=0" => false,
        "neck=1" => true,
        _ => return Err(bad("bad neck flag")),
    };
    let body = rest
        .trim()
        .strip_prefix("entries=[")
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| bad("bad entries list"))?;
    let mut entries = Vec::new();
    let mut s = body;
    while !s.is_empty() {
        let s1 = s.strip_prefix('(').ok_or_else(|| bad("expected '('"))?;
        let close = s1.find("])").ok_or_else(|| bad("unterminated entry"))?;
        let inner = &s1[..close + 1];
        let (ifs, types) = inner.split_once(",[").ok_or_else(|| bad("bad entry"))?;
        let ifs: usize = ifs.trim().parse().map_err(|_| bad("bad ifs index"))?;
        let types = types.strip_suffix(']').ok_or_else(|| bad("bad types"))?;
        let child_types = types
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.trim().parse::<u16>().ok().and_then(|t| t.checked_sub(1)).ok_or_else(|| bad("bad type label")))
            .collect::<Result<Vec<_>>>()?;
        entries.push(EnvEntry { ifs, child_types });
        s = &s1[close + 2..];
        s = s.strip_prefix(',').unwrap_or(s);
    }
    let env = Environment { entries };
    if env.is_neck() != neck_flag {
        return Err(bad("neck flag disagrees with entries"));
    }
    Ok(env)
}

/// Neck gaps and the running statistics bounding them.
#[derive(Debug, Clone, Serialize)]
pub struct NeckStats {
    pub levels: Vec<usize>,
    pub gaps: Vec<usize>,
    /// `max_{i<=k} gap_i / ln k` for `k = 2..=K` (index `k-2`).
    pub max_gap_over_log: Vec<f64>,
    /// `Σ_{i<=k} gap_i / (k ln k)` for `k = 2..=K`.
    pub sum_over_klogk: Vec<f64>,
    /// Cut-set quantities `(k, y_k, z_k)` when attached.
    pub cut: Vec<CutNeckStat>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CutNeckStat {
    pub k: usize,
    pub y_k: usize,
    pub z_k: usize,
}

impl NeckStats {
    /// Whether both trajectories stay below the thresholds for all `k >= k0`.
    pub fn eventually_below(&self, k0: usize, max_threshold: f64, sum_threshold: f64) -> bool {
        let start = k0.max(2) - 2;
        self.max_gap_over_log.iter().skip(start).all(|&x| x <= max_threshold)
            && self.sum_over_klogk.iter().skip(start).all(|&x| x <= sum_threshold)
    }
}

/// Gap statistics over the first `count` necks.
pub fn neck_statistics(tree: &mut VTree, count: usize) -> Result<NeckStats> {
    if count < 1 {
        return Err(Error::Parameter("need at least one neck".into()));
    }
    let levels = tree.neck_levels(count)?;
    let mut gaps = Vec::with_capacity(count);
    let mut prev = 0;
    for &l in &levels {
        gaps.push(l - prev);
        prev = l;
    }
    let mut max_gap_over_log = Vec::new();
    let mut sum_over_klogk = Vec::new();
    let mut running_max = 0usize;
    let mut running_sum = 0usize;
    for (i, &g) in gaps.iter().enumerate() {
        running_max = running_max.max(g);
        running_sum += g;
        let k = (i + 1) as f64;
        if i >= 1 {
            max_gap_over_log.push(running_max as f64 / k.ln());
            sum_over_klogk.push(running_sum as f64 / (k * k.ln()));
        }
    }
    Ok(NeckStats { levels, gaps, max_gap_over_log, sum_over_klogk, cut: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::make_sg;
    use rand::SeedableRng;

    fn sg2() -> Arc<FamilySpec> {
        Arc::new(FamilySpec::single(make_sg(2).unwrap()))
    }
    fn mixed() -> Arc<FamilySpec> {
        Arc::new(FamilySpec::new(vec![(make_sg(2).unwrap(), 0.5), (make_sg(3).unwrap(), 0.5)]).unwrap())
    }

    #[test]
    fn v1_every_level_is_a_neck() {
        let mut t = VTree::new(mixed(), 1, 3).unwrap();
        assert_eq!(t.neck_levels(20).unwrap(), (1..=20).collect::<Vec<_>>());
        let s = neck_statistics(&mut t, 50).unwrap();
        assert!(s.gaps.iter().all(|&g| g == 1));
        assert!((s.max_gap_over_log[48] - 1.0 / 50f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_types_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(sample_environment(&mixed(), 0, &mut rng).is_err());
        assert!(VTree::new(mixed(), 0, 1).is_err());
    }

    #[test]
    fn neck_probabilities_match_enumeration() {
        assert_eq!(neck_probability(&mixed(), 1), 1.0);
        // enumerate all 2^6 type assignments for V=2, SG2 only
        let all_equal = (0u32..64).filter(|m| *m == 0 || *m == 63).count();
        assert!((neck_probability(&sg2(), 2) - all_equal as f64 / 64.0).abs() < 1e-15);
        assert!((neck_probability(&mixed(), 2) - 81.0 / 8192.0).abs() < 1e-15);
    }

    #[test]
    fn replay_is_deterministic() {
        let mut a = VTree::new(mixed(), 3, 99).unwrap();
        let mut b = VTree::new(mixed(), 3, 99).unwrap();
        a.realize(40).unwrap();
        b.realize(40).unwrap();
        assert_eq!(a.dump(), b.dump());
        // lazily extending in a different order gives the same environments
        let mut c = VTree::new(mixed(), 3, 99).unwrap();
        c.realize(10).unwrap();
        c.realize(40).unwrap();
        assert_eq!(a.dump(), c.dump());
    }

    #[test]
    fn dump_round_trips() {
        let mut a = VTree::new(mixed(), 3, 5).unwrap();
        a.realize(25).unwrap();
        let text = a.dump();
        let b = VTree::from_dump(mixed(), &text).unwrap();
        assert_eq!(b.dump(), text);
        assert_eq!(b.envs(), a.envs());
        assert!(VTree::from_dump(mixed(), "level 1: neck=1 entries=[(0,[1,2,1])]").is_err());
    }

    #[test]
    fn subtree_identity_and_equal_types() {
        let mut t = VTree::new(mixed(), 2, 11).unwrap();
        let mut root = t.subtree_at(&[]).unwrap();
        assert!(VTree::same_labelled_tree(&mut t, &mut root, 5).unwrap());
        let nodes = t.nodes_at(3).unwrap();
        let mut found = false;
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                if nodes[i].1 == nodes[j].1 {
                    let mut a = t.subtree_at(&nodes[i].0).unwrap();
                    let mut b = t.subtree_at(&nodes[j].0).unwrap();
                    assert!(VTree::same_labelled_tree(&mut a, &mut b, 5).unwrap());
                    found = true;
                }
            }
        }
        assert!(found);
        assert!(matches!(t.subtree_at(&[9]), Err(Error::InvalidAddress(_))));
    }

    #[test]
    fn forced_necks_are_necks() {
        let mut t = VTree::new(mixed(), 3, 1).unwrap().with_forced_necks([2, 4]);
        assert!(t.is_neck(2).unwrap());
        assert!(t.is_neck(4).unwrap());
        assert!(t.is_conditioned());
    }

    #[test]
    fn level_cap_is_enforced() {
        let mut t = VTree::new(sg2(), 2, 1).unwrap().with_level_cap(3);
        assert!(matches!(t.neck_levels(10), Err(Error::CapExceeded { cap: 3 })));
    }

    #[test]
    fn type_consistency() {
        let mut t = VTree::new(mixed(), 3, 21).unwrap();
        let nodes = t.nodes_at(4).unwrap();
        for (a, ta) in &nodes {
            for (b, tb) in &nodes {
                if ta == tb {
                    assert_eq!(t.ifs_at(a).unwrap(), t.ifs_at(b).unwrap());
                }
            }
        }
    }

    #[test]
    fn gaps_sum_to_levels() {
        let mut t = VTree::new(sg2(), 2, 4).unwrap();
        let s = neck_statistics(&mut t, 200).unwrap();
        assert_eq!(s.gaps.iter().sum::<usize>(), *s.levels.last().unwrap());
        assert!(s.gaps.iter().all(|&g| g >= 1));
    }
}
