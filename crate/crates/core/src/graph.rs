//! Weighted graphs on finite lattice truncations.
//!
//! A [`WeightedGraph`] stores every undirected edge exactly once, so the two
//! directions of an edge share one `f64` and are bitwise equal. Loops
//! (`u == v`) are allowed; they count toward the vertex measure
//! `m(v) = sum of incident weights` but never toward the Laplacian, since
//! `w(v,v) (f(v) - f(v)) = 0`.
//!
//! Only strictly positive weights are stored: an edge exists iff its weight
//! is positive. Callers that need the influence topology independently of
//! the weights (zero-weight pairs included) use [`Neighborhoods`].

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId(pub usize);

impl VertexId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Lattice label of a vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Coord {
    Line(i64),
    Plane(i64, i64),
}

impl Coord {
    pub fn to_vec(self) -> Vec<i64> {
        match self {
            Coord::Line(i) => vec![i],
            Coord::Plane(i, j) => vec![i, j],
        }
    }

    pub fn from_slice(c: &[i64]) -> Option<Coord> {
        match *c {
            [i] => Some(Coord::Line(i)),
            [i, j] => Some(Coord::Plane(i, j)),
            _ => None,
        }
    }

    /// `(i, j)` with `j = 0` for chain coordinates.
    pub fn ij(self) -> (i64, i64) {
        match self {
            Coord::Line(i) => (i, 0),
            Coord::Plane(i, j) => (i, j),
        }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coord::Line(i) => write!(f, "({i})"),
            Coord::Plane(i, j) => write!(f, "({i},{j})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Free,
    Torus,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Boundary::Free),
            "torus" => Ok(Boundary::Torus),
            other => Err(Error::InvalidParameter(format!("unknown boundary mode '{other}'"))),
        }
    }
}

/// Finite lattice truncation. Axis coordinates run over
/// `-(n-1)/2 ..= n/2`, so odd extents are centred on the origin and even
/// extents are symmetric about `1/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatticeShape {
    Chain(usize),
    Square(usize, usize),
}

impl LatticeShape {
    pub fn square(n: usize) -> Self {
        LatticeShape::Square(n, n)
    }

    pub fn vertex_count(self) -> usize {
        match self {
            LatticeShape::Chain(n) => n,
            LatticeShape::Square(nx, ny) => nx * ny,
        }
    }

    fn extents(self) -> Vec<usize> {
        match self {
            LatticeShape::Chain(n) => vec![n],
            LatticeShape::Square(nx, ny) => vec![nx, ny],
        }
    }

    pub fn origin(extent: usize) -> i64 {
        -(((extent as i64) - 1) / 2)
    }

    /// Coordinates in row-major order (first coordinate major).
    pub fn coords(self) -> Vec<Coord> {
        match self {
            LatticeShape::Chain(n) => {
                let o = Self::origin(n);
                (0..n as i64).map(|k| Coord::Line(o + k)).collect()
            }
            LatticeShape::Square(nx, ny) => {
                let (ox, oy) = (Self::origin(nx), Self::origin(ny));
                let mut out = Vec::with_capacity(nx * ny);
                for a in 0..nx as i64 {
                    for b in 0..ny as i64 {
                        out.push(Coord::Plane(ox + a, oy + b));
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeRule {
    NearestNeighbor,
    /// Axis-aligned neighbors up to distance `n`.
    Range(usize),
}

impl EdgeRule {
    fn reach(self) -> usize {
        match self {
            EdgeRule::NearestNeighbor => 1,
            EdgeRule::Range(n) => n,
        }
    }
}

/// Edge handed to a lattice weight function. `step` is the lattice
/// displacement from `from` to `to` before any torus wrap; it always points
/// in a positive axis direction.
#[derive(Clone, Copy, Debug)]
pub struct EdgeInfo {
    pub from: Coord,
    pub to: Coord,
    pub step: (i64, i64),
}

impl EdgeInfo {
    pub fn is_horizontal(&self) -> bool {
        self.step.1 == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub w: f64,
}

/// Dense real function on the vertices of a graph.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector(vec![0.0; n])
    }

    pub fn constant(n: usize, c: f64) -> Self {
        StateVector(vec![c; n])
    }

    pub fn indicator(n: usize, v: usize) -> Self {
        let mut x = vec![0.0; n];
        x[v] = 1.0;
        StateVector(x)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self, p: Norm) -> f64 {
        lp_norm(&self.0, p)
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

impl FromIterator<f64> for StateVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        StateVector(iter.into_iter().collect())
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Exponent of an ℓ^p norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm {
    L1,
    L2,
    Linf,
    P(f64),
}

impl Norm {
    pub fn new(p: f64) -> Result<Norm> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidNorm(p));
        }
        Ok(if p == 1.0 {
            Norm::L1
        } else if p == 2.0 {
            Norm::L2
        } else if p.is_infinite() {
            Norm::Linf
        } else {
            Norm::P(p)
        })
    }
}

/// ℓ^p norm of `f`. `Norm::P(p)` with `p < 1` is rejected by [`Norm::new`];
/// constructing it directly and passing it here panics.
pub fn lp_norm(f: &[f64], p: Norm) -> f64 {
    match p {
        Norm::L1 => f.iter().map(|x| x.abs()).sum(),
        Norm::L2 => {
            // scaled to avoid underflow for tiny perturbations
            let scale = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return scale;
            }
            scale * f.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
        }
        Norm::Linf => f.iter().fold(0.0f64, |a, x| a.max(x.abs())),
        Norm::P(p) => {
            assert!(p >= 1.0, "norm exponent must be >= 1");
            let scale = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return scale;
            }
            scale * f.iter().map(|x| (x.abs() / scale).powf(p)).sum::<f64>().powf(1.0 / p)
        }
    }
}

/// Symmetric influence sets `N(v)`, independent of any edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for (v, list) in lists.iter().enumerate() {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::DuplicateEdge { u: v, v: w[0] });
                }
            }
            for &w in &sorted {
                if w >= n {
                    return Err(Error::VertexOutOfRange(w));
                }
                if w == v {
                    return Err(Error::InvalidParameter(format!("vertex {v} lists itself as a neighbor")));
                }
            }
            members.extend_from_slice(&sorted);
            offsets.push(members.len());
        }
        let nb = Neighborhoods { offsets, members };
        for v in 0..n {
            for &w in nb.of(v) {
                if nb.of(w).binary_search(&v).is_err() {
                    return Err(Error::AsymmetricNeighborhood { v, w });
                }
            }
        }
        Ok(nb)
    }

    /// Non-loop adjacency of `g` as influence sets.
    pub fn from_graph(g: &WeightedGraph) -> Self {
        let lists = (0..g.vertex_count()).map(|v| g.neighbors(v).map(|(w, _)| w).collect()).collect();
        Self::from_lists(lists).expect("graph adjacency is symmetric by construction")
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, v: usize) -> &[usize] {
        &self.members[self.offsets[v]..self.offsets[v + 1]]
    }

    /// `D = max_v |N(v)|`.
    pub fn max_size(&self) -> usize {
        (0..self.len()).map(|v| self.of(v).len()).max().unwrap_or(0)
    }

    pub fn min_size(&self) -> usize {
        (0..self.len()).map(|v| self.of(v).len()).min().unwrap_or(0)
    }

    /// Unordered influence pairs `(v, v')` with `v < v'`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |v| self.of(v).iter().filter(move |&&w| w > v).map(move |&w| (v, w)))
    }
}

/// Discrete gradient energy `Q(x) = sum_v sum_{v' in N(v)} |x_v' - x_v|^2`
/// (both orientations of every pair are counted).
pub fn q_form(nbhd: &Neighborhoods, x: &[f64]) -> Result<f64> {
    if x.len() != nbhd.len() {
        return Err(Error::LengthMismatch { expected: nbhd.len(), got: x.len() });
    }
    Ok((0..nbhd.len()).map(|v| nbhd.of(v).iter().map(|&w| (x[w] - x[v]).powi(2)).sum::<f64>()).sum())
}

const DIST_CACHE_CAP: usize = 4096;

pub struct WeightedGraph {
    coords: Vec<Option<Coord>>,
    index: HashMap<Coord, usize>,
    edges: Vec<Edge>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    loops: Vec<f64>,
    measure: Vec<f64>,
    boundary: Boundary,
    dist_cache: Mutex<HashMap<usize, Arc<[u32]>>>,
}

impl Clone for WeightedGraph {
    fn clone(&self) -> Self {
        WeightedGraph {
            coords: self.coords.clone(),
            index: self.index.clone(),
            edges: self.edges.clone(),
            offsets: self.offsets.clone(),
            targets: self.targets.clone(),
            weights: self.weights.clone(),
            loops: self.loops.clone(),
            measure: self.measure.clone(),
            boundary: self.boundary,
            dist_cache: Mutex::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for WeightedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightedGraph")
            .field("vertices", &self.vertex_count())
            .field("edges", &self.edges.len())
            .field("boundary", &self.boundary)
            .finish()
    }
}

pub const UNREACHABLE: u32 = u32::MAX;

impl WeightedGraph {
    /// Builds a graph from undirected edges. Zero weights are dropped,
    /// negative or non-finite weights and repeated pairs are rejected.
    /// Connectivity is not required here; see [`WeightedGraph::require_connected`].
    pub fn new(coords: Vec<Option<Coord>>, edges: impl IntoIterator<Item = Edge>, boundary: Boundary) -> Result<Self> {
        let n = coords.len();
        let mut index = HashMap::new();
        for (v, c) in coords.iter().enumerate() {
            if let Some(c) = c {
                if index.insert(*c, v).is_some() {
                    return Err(Error::InvalidParameter(format!("duplicate coordinate label {c}")));
                }
            }
        }
        let mut canon = Vec::new();
        for e in edges {
            if e.u >= n {
                return Err(Error::VertexOutOfRange(e.u));
            }
            if e.v >= n {
                return Err(Error::VertexOutOfRange(e.v));
            }
            if !e.w.is_finite() {
                return Err(Error::NonFiniteWeight { u: e.u, v: e.v });
            }
            if e.w < 0.0 {
                return Err(Error::NegativeWeight { u: e.u, v: e.v, weight: e.w });
            }
            if e.w == 0.0 {
                continue;
            }
            let (u, v) = if e.u <= e.v { (e.u, e.v) } else { (e.v, e.u) };
            canon.push(Edge { u, v, w: e.w });
        }
        canon.sort_by_key(|e| (e.u, e.v));
        for pair in canon.windows(2) {
            if (pair[0].u, pair[0].v) == (pair[1].u, pair[1].v) {
                return Err(Error::DuplicateEdge { u: pair[0].u, v: pair[0].v });
            }
        }

        let mut degree = vec![0usize; n];
        let mut loops = vec![0.0; n];
        for e in &canon {
            if e.u == e.v {
                loops[e.u] = e.w;
            } else {
                degree[e.u] += 1;
                degree[e.v] += 1;
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0usize; offsets[n]];
        let mut weights = vec![0.0; offsets[n]];
        for e in canon.iter().filter(|e| e.u != e.v) {
            targets[fill[e.u]] = e.v;
            weights[fill[e.u]] = e.w;
            fill[e.u] += 1;
            targets[fill[e.v]] = e.u;
            weights[fill[e.v]] = e.w;
            fill[e.v] += 1;
        }
        let measure = (0..n).map(|v| loops[v] + weights[offsets[v]..offsets[v + 1]].iter().sum::<f64>()).collect();

        Ok(WeightedGraph {
            coords,
            index,
            edges: canon,
            offsets,
            targets,
            weights,
            loops,
            measure,
            boundary,
            dist_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    /// Undirected edges including loops, sorted by `(u, v)` with `u <= v`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn coord(&self, v: usize) -> Option<Coord> {
        self.coords[v]
    }

    pub fn coords(&self) -> &[Option<Coord>] {
        &self.coords
    }

    pub fn vertex_at(&self, c: Coord) -> Option<VertexId> {
        self.index.get(&c).copied().map(VertexId)
    }

    /// Non-loop neighbors of `v` with their weights.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.targets[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Maximum number of non-loop neighbors.
    pub fn max_degree(&self) -> usize {
        (0..self.vertex_count()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn loop_weight(&self, v: usize) -> f64 {
        self.loops[v]
    }

    pub fn has_loops(&self) -> bool {
        self.loops.iter().any(|&w| w > 0.0)
    }

    /// `w(u, v)`, zero when absent.
    pub fn weight(&self, u: usize, v: usize) -> f64 {
        if u == v {
            return self.loops[u];
        }
        self.neighbors(u).find(|&(t, _)| t == v).map_or(0.0, |(_, w)| w)
    }

    /// Vertex measure `m(v)`.
    pub fn measure(&self, v: usize) -> f64 {
        self.measure[v]
    }

    pub fn measures(&self) -> &[f64] {
        &self.measure
    }

    pub fn component_count(&self) -> usize {
        let n = self.vertex_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for (t, _) in self.neighbors(u) {
                    if !seen[t] {
                        seen[t] = true;
                        queue.push_back(t);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.vertex_count() > 0 && self.component_count() == 1
    }

    pub fn require_connected(&self) -> Result<()> {
        if self.edges.iter().all(|e| e.u == e.v) {
            return Err(Error::NoEdges);
        }
        match self.component_count() {
            1 => Ok(()),
            components => Err(Error::Disconnected { components }),
        }
    }

    /// Hop distances from `source`; `UNREACHABLE` marks other components.
    /// Results are memoized.
    pub fn distances_from(&self, source: usize) -> Arc<[u32]> {
        if let Some(d) = self.dist_cache.lock().unwrap().get(&source) {
            return Arc::clone(d);
        }
        let d: Arc<[u32]> = self.bfs(source).into();
        let mut cache = self.dist_cache.lock().unwrap();
        if cache.len() >= DIST_CACHE_CAP {
            cache.clear();
        }
        cache.insert(source, Arc::clone(&d));
        d
    }

    fn bfs(&self, source: usize) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.vertex_count()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u];
            for (t, _) in self.neighbors(u) {
                if dist[t] == UNREACHABLE {
                    dist[t] = du + 1;
                    queue.push_back(t);
                }
            }
        }
        dist
    }

    /// Multi-source hop distance: `rho(sources, v)` for every `v`.
    pub fn distances_from_set(&self, sources: &[usize]) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.vertex_count()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            for (t, _) in self.neighbors(u) {
                if dist[t] == UNREACHABLE {
                    dist[t] = dist[u] + 1;
                    queue.push_back(t);
                }
            }
        }
        dist
    }

    /// Graph metric: smallest number of edges on a path from `u` to `v`.
    pub fn graph_metric(&self, u: VertexId, v: VertexId) -> Result<u32> {
        self.check_vertex(u.0)?;
        self.check_vertex(v.0)?;
        match self.distances_from(u.0)[v.0] {
            UNREACHABLE => Err(Error::Unreachable(v.0, u.0)),
            d => Ok(d),
        }
    }

    fn check_vertex(&self, v: usize) -> Result<()> {
        if v < self.vertex_count() {
            Ok(())
        } else {
            Err(Error::VertexOutOfRange(v))
        }
    }

    /// Vertices of the closed ball `B(v, r)`.
    pub fn ball(&self, v: VertexId, r: u32) -> Vec<usize> {
        let d = self.distances_from(v.0);
        (0..self.vertex_count()).filter(|&u| d[u] <= r).collect()
    }

    /// `Vol(v, r) = sum of m over B(v, r)`.
    pub fn ball_volume(&self, v: VertexId, r: u32) -> Result<f64> {
        self.check_vertex(v.0)?;
        let d = self.distances_from(v.0);
        Ok((0..self.vertex_count()).filter(|&u| d[u] <= r).map(|u| self.measure[u]).sum())
    }

    /// Graph Laplacian. Normalized: `(1/m(v)) sum_v' w(v,v') (f(v') - f(v))`;
    /// unnormalized omits the `1/m(v)` factor.
    pub fn apply_laplacian(&self, f: &[f64], normalized: bool) -> Result<StateVector> {
        let n = self.vertex_count();
        if f.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: f.len() });
        }
        let mut out = vec![0.0; n];
        self.laplacian_into(f, normalized, &mut out)?;
        Ok(out.into())
    }

    pub(crate) fn laplacian_into(&self, f: &[f64], normalized: bool, out: &mut [f64]) -> Result<()> {
        for v in 0..self.vertex_count() {
            let s: f64 = self.neighbors(v).map(|(t, w)| w * (f[t] - f[v])).sum();
            out[v] = if normalized {
                let m = self.measure[v];
                if m <= 0.0 {
                    return Err(Error::IsolatedVertex(v));
                }
                s / m
            } else {
                s
            };
        }
        Ok(())
    }

    /// Vertices on the outermost ring of a lattice truncation (empty for
    /// torus graphs and for graphs without coordinates).
    pub fn outer_ring(&self) -> Vec<usize> {
        if self.boundary == Boundary::Torus {
            return Vec::new();
        }
        let labelled: Vec<(usize, (i64, i64))> =
            self.coords.iter().enumerate().filter_map(|(v, c)| c.map(|c| (v, c.ij()))).collect();
        if labelled.is_empty() {
            return Vec::new();
        }
        let plane = matches!(self.coords.iter().flatten().next(), Some(Coord::Plane(..)));
        let (mut imin, mut imax, mut jmin, mut jmax) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for &(_, (i, j)) in &labelled {
            imin = imin.min(i);
            imax = imax.max(i);
            jmin = jmin.min(j);
            jmax = jmax.max(j);
        }
        labelled
            .into_iter()
            .filter(|&(_, (i, j))| i == imin || i == imax || (plane && (j == jmin || j == jmax)))
            .map(|(v, _)| v)
            .collect()
    }

    /// Smallest hop distance from `v` to the outer ring (`u32::MAX` when the
    /// graph has no ring, i.e. torus mode).
    pub fn distance_to_boundary(&self, v: usize) -> u32 {
        let ring = self.outer_ring();
        if ring.is_empty() {
            return u32::MAX;
        }
        let d = self.distances_from(v);
        ring.iter().map(|&u| d[u]).min().unwrap_or(u32::MAX)
    }

    /// Extents of the coordinate box, `(n, 1)` for chains.
    pub fn extents(&self) -> Option<(usize, usize)> {
        let mut lo = (i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN);
        for c in self.coords.iter().flatten() {
            let (i, j) = c.ij();
            lo = (lo.0.min(i), lo.1.min(j));
            hi = (hi.0.max(i), hi.1.max(j));
        }
        (lo.0 != i64::MAX).then(|| ((hi.0 - lo.0 + 1) as usize, (hi.1 - lo.1 + 1) as usize))
    }

    /// Largest extent of the coordinate box, halved (lattice "radius").
    pub fn lattice_radius(&self) -> Option<f64> {
        let mut lo = (i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN);
        let mut any = false;
        for c in self.coords.iter().flatten() {
            any = true;
            let (i, j) = c.ij();
            lo = (lo.0.min(i), lo.1.min(j));
            hi = (hi.0.max(i), hi.1.max(j));
        }
        any.then(|| ((hi.0 - lo.0).max(hi.1 - lo.1) as f64) / 2.0)
    }

    /// Vertex closest to the coordinate origin.
    pub fn central_vertex(&self) -> usize {
        let origin = match self.coords.iter().flatten().next() {
            Some(Coord::Line(_)) => Coord::Line(0),
            _ => Coord::Plane(0, 0),
        };
        self.vertex_at(origin).map_or(self.vertex_count() / 2, |v| v.0)
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            vertices: self
                .coords
                .iter()
                .enumerate()
                .map(|(id, c)| VertexJson { id, coords: c.map(Coord::to_vec) })
                .collect(),
            edges: self.edges.iter().map(|e| EdgeJson { u: e.u, v: e.v, w: e.w }).collect(),
            boundary: self.boundary,
        }
    }

    pub fn from_json(json: &GraphJson) -> Result<Self> {
        let n = json.vertices.len();
        let mut coords = vec![None; n];
        let mut seen = vec![false; n];
        for vj in &json.vertices {
            if vj.id >= n || seen[vj.id] {
                return Err(Error::InvalidParameter(format!("vertex ids must be 0..{n} without repeats")));
            }
            seen[vj.id] = true;
            coords[vj.id] = match &vj.coords {
                None => None,
                Some(c) => Some(
                    Coord::from_slice(c)
                        .ok_or_else(|| Error::InvalidParameter(format!("coordinate {c:?} must have 1 or 2 entries")))?,
                ),
            };
        }
        WeightedGraph::new(coords, json.edges.iter().map(|e| Edge { u: e.u, v: e.v, w: e.w }), json.boundary)
    }
}

/// Builds a lattice graph. Every undirected edge is generated once, from its
/// endpoint with the smaller coordinate along the step axis.
pub fn build_lattice_graph<F>(
    shape: LatticeShape,
    rule: EdgeRule,
    weight_fn: F,
    boundary: Boundary,
) -> Result<WeightedGraph>
where
    F: Fn(&EdgeInfo) -> f64,
{
    let reach = rule.reach();
    if reach == 0 {
        return Err(Error::InvalidParameter("edge range must be at least 1".into()));
    }
    let extents = shape.extents();
    for &e in &extents {
        if e < 3 {
            return Err(Error::ExtentTooSmall { extent: e, reason: "lattice extents must be at least 3".into() });
        }
        if e < 2 * reach + 1 {
            return Err(Error::ExtentTooSmall {
                extent: e,
                reason: format!("range-{reach} edges need extent >= {}", 2 * reach + 1),
            });
        }
    }
    let coords = shape.coords();
    let origins: Vec<i64> = extents.iter().map(|&e| LatticeShape::origin(e)).collect();
    let index_of = |c: Coord| -> usize {
        match (c, shape) {
            (Coord::Line(i), _) => (i - origins[0]) as usize,
            (Coord::Plane(i, j), LatticeShape::Square(_, ny)) => {
                (i - origins[0]) as usize * ny + (j - origins[1]) as usize
            }
            _ => unreachable!(),
        }
    };
    let wrap = |x: i64, axis: usize| -> Option<i64> {
        let (o, n) = (origins[axis], extents[axis] as i64);
        let k = x - o;
        if (0..n).contains(&k) {
            Some(x)
        } else if boundary == Boundary::Torus {
            Some(o + k.rem_euclid(n))
        } else {
            None
        }
    };

    let mut edges = Vec::new();
    for &c in &coords {
        let u = index_of(c);
        for axis in 0..extents.len() {
            for k in 1..=reach as i64 {
                let step = if axis == 0 { (k, 0) } else { (0, k) };
                let target = match c {
                    Coord::Line(i) => wrap(i + k, 0).map(Coord::Line),
                    Coord::Plane(i, j) => {
                        let (ti, tj) = (i + step.0, j + step.1);
                        match (wrap(ti, 0), wrap(tj, 1)) {
                            (Some(a), Some(b)) => Some(Coord::Plane(a, b)),
                            _ => None,
                        }
                    }
                };
                let Some(t) = target else { continue };
                let w = weight_fn(&EdgeInfo { from: c, to: t, step });
                edges.push(Edge { u, v: index_of(t), w });
            }
        }
    }
    let g = WeightedGraph::new(coords.into_iter().map(Some).collect(), edges, boundary)?;
    g.require_connected()?;
    Ok(g)
}

/// Unit-weight nearest-neighbor lattice.
pub fn unit_lattice(shape: LatticeShape, boundary: Boundary) -> Result<WeightedGraph> {
    build_lattice_graph(shape, EdgeRule::NearestNeighbor, |_| 1.0, boundary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexJson {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub u: usize,
    pub v: usize,
    pub w: f64,
}

/// On-disk graph format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub vertices: Vec<VertexJson>,
    pub edges: Vec<EdgeJson>,
    pub boundary: Boundary,
}
