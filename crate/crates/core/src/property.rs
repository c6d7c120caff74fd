//! Empirical audits of volume growth, local ellipticity, the Poincaré
//! inequality and rough isometries between graphs.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::ols;
use crate::graph::{Boundary, VertexId, WeightedGraph, UNREACHABLE};

/// Tolerance below the target dimension that the `d ≥ 2` gate accepts.
pub const VG_GATE_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VgReport {
    /// Slope of `log Vol` against `log(r + 1/2)`.
    pub d: f64,
    pub d_stderr: f64,
    pub r2: f64,
    /// `min Vol/r^d` over probes.
    pub c1: f64,
    /// `max Vol/r^d` over probes.
    pub c2: f64,
    pub centers: Vec<usize>,
    pub radii: Vec<u32>,
    /// Volume per radius, averaged over centers.
    pub mean_volume: Vec<f64>,
    pub power_law: bool,
}

impl VgReport {
    /// Whether the fitted dimension supports `d ≥ target`.
    pub fn supports(&self, target: f64) -> bool {
        self.d >= target - VG_GATE_TOL
    }
}

/// Largest ball radius that stays clear of the truncation around `v`.
pub fn guard_radius(g: &WeightedGraph, v: usize) -> u32 {
    match g.boundary() {
        Boundary::Free => {
            let d = g.distance_to_boundary(v);
            if d == u32::MAX {
                // no lattice labels: the eccentricity bounds every ball
                g.distances_from(v).iter().copied().filter(|&x| x != UNREACHABLE).max().unwrap_or(0)
            } else {
                d
            }
        }
        Boundary::Torus => torus_half_extent(g),
    }
}

fn torus_half_extent(g: &WeightedGraph) -> u32 {
    let mut lo = (i64::MAX, i64::MAX);
    let mut hi = (i64::MIN, i64::MIN);
    let mut plane = false;
    for c in g.coords().iter().flatten() {
        let (i, j) = c.ij();
        plane |= matches!(c, crate::graph::Coord::Plane(..));
        lo = (lo.0.min(i), lo.1.min(j));
        hi = (hi.0.max(i), hi.1.max(j));
    }
    if lo.0 == i64::MAX {
        return 0;
    }
    let ex = hi.0 - lo.0 + 1;
    let ext = if plane { ex.min(hi.1 - lo.1 + 1) } else { ex };
    (ext / 2) as u32
}

/// Probe centers: the central vertex and its lattice neighbors at
/// offsets up to `spread`, limited to `count` centers.
pub fn default_centers(g: &WeightedGraph, count: usize, spread: i64) -> Vec<usize> {
    use crate::graph::Coord;
    let c = g.central_vertex();
    let mut out = vec![c];
    if let Some(coord) = g.coord(c) {
        let (i0, j0) = coord.ij();
        let plane = matches!(coord, Coord::Plane(..));
        let offsets: Vec<(i64, i64)> = if plane {
            vec![
                (spread, 0),
                (0, spread),
                (-spread, 0),
                (0, -spread),
                (spread, spread),
                (-spread, -spread),
                (spread, -spread),
                (-spread, spread),
            ]
        } else {
            (1..=4).flat_map(|k| [(k * spread, 0), (-k * spread, 0)]).collect()
        };
        for (di, dj) in offsets {
            let target = if plane { Coord::Plane(i0 + di, j0 + dj) } else { Coord::Line(i0 + di) };
            if let Some(v) = g.vertex_at(target) {
                if !out.contains(&v.0) {
                    out.push(v.0);
                }
            }
            if out.len() >= count {
                break;
            }
        }
    }
    out
}

/// Fits `Vol(v, r) ~ r^d` over the given centers and radii.
pub fn check_vg(g: &WeightedGraph, centers: &[usize], radii: &[u32]) -> Result<VgReport> {
    if centers.len() < 5 || radii.len() < 6 {
        return Err(Error::InvalidParameter(format!(
            "volume-growth fit needs at least 5 centers and 6 radii, got {} and {}",
            centers.len(),
            radii.len()
        )));
    }
    let r_max = *radii.iter().max().unwrap();
    if radii.contains(&0) {
        return Err(Error::InvalidParameter("radii must be positive".into()));
    }
    for &c in centers {
        if c >= g.vertex_count() {
            return Err(Error::VertexOutOfRange(c));
        }
        let guard = guard_radius(g, c);
        if r_max > guard {
            return Err(Error::BoundaryGuard(format!(
                "radius {r_max} exceeds the clearance {guard} around center {c}"
            )));
        }
    }
    let vols: Vec<Vec<f64>> = centers
        .par_iter()
        .map(|&c| radii.iter().map(|&r| g.ball_volume(VertexId(c), r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for row in &vols {
        for (&r, &vol) in radii.iter().zip(row) {
            lx.push((r as f64 + 0.5).ln());
            ly.push(vol.ln());
        }
    }
    let f = ols(&lx, &ly)?;
    let d = f.slope;
    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    for row in &vols {
        for (&r, &vol) in radii.iter().zip(row) {
            let c = vol / (r as f64).powf(d);
            c1 = c1.min(c);
            c2 = c2.max(c);
        }
    }
    let mean_volume = (0..radii.len()).map(|k| vols.iter().map(|r| r[k]).sum::<f64>() / vols.len() as f64).collect();
    Ok(VgReport {
        d,
        d_stderr: f.slope_stderr,
        r2: f.r2,
        c1,
        c2,
        centers: centers.to_vec(),
        radii: radii.to_vec(),
        mean_volume,
        power_law: f.r2 >= 0.99,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// `min w(v,v')/m(v)` over edges (loops included).
    pub alpha: f64,
    pub pass: bool,
    pub witness: (usize, usize),
    pub w_min: f64,
    pub w_max: f64,
    /// Maximum number of incident edges, loops counted.
    pub degree: usize,
    /// Sufficient bound `w_min / (D w_max)`.
    pub degree_bound: f64,
}

pub const DELTA_THRESHOLD: f64 = 1e-12;

/// Local elliptic constant of `g`.
pub fn check_delta(g: &WeightedGraph) -> Result<DeltaReport> {
    let mut alpha = f64::INFINITY;
    let mut witness = (0, 0);
    let (mut w_min, mut w_max) = (f64::INFINITY, 0.0f64);
    let mut degree = 0;
    for v in 0..g.vertex_count() {
        let m = g.measure(v);
        if !(m > 0.0) {
            return Err(Error::IsolatedVertex(v));
        }
        let lw = g.loop_weight(v);
        let incident = g.neighbors(v).chain((lw > 0.0).then_some((v, lw)));
        let mut deg = 0;
        for (u, w) in incident {
            deg += 1;
            w_min = w_min.min(w);
            w_max = w_max.max(w);
            if w / m < alpha {
                alpha = w / m;
                witness = (v, u);
            }
        }
        degree = degree.max(deg);
    }
    if degree == 0 {
        return Err(Error::NoEdges);
    }
    Ok(DeltaReport {
        alpha,
        pass: alpha > DELTA_THRESHOLD,
        witness,
        w_min,
        w_max,
        degree,
        degree_bound: w_min / (degree as f64 * w_max),
    })
}

/// Optimal constant `C` in
/// `Σ_{B(v0,r)} m |f − f_B|² ≤ C r² Σ_{v,v' ∈ B(v0,2r)} w (f(v) − f(v'))²`,
/// the double sum running over ordered pairs.
pub fn estimate_poincare_constant(g: &WeightedGraph, center: usize, r: u32) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidParameter("radius must be positive".into()));
    }
    if center >= g.vertex_count() {
        return Err(Error::VertexOutOfRange(center));
    }
    if g.coords().iter().any(|c| c.is_some()) {
        let guard = guard_radius(g, center);
        if 2 * r > guard {
            return Err(Error::BoundaryGuard(format!(
                "ball of radius {} around {center} reaches the truncation",
                2 * r
            )));
        }
    }
    let dist = g.distances_from(center);
    let big: Vec<usize> = (0..g.vertex_count()).filter(|&v| dist[v] <= 2 * r).collect();
    let idx: HashMap<usize, usize> = big.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = big.len();
    if n < 2 {
        return Err(Error::SingularDirichlet);
    }
    let mut num = DMatrix::<f64>::zeros(n, n);
    let inner: Vec<usize> = (0..n).filter(|&i| dist[big[i]] <= r).collect();
    let vol: f64 = inner.iter().map(|&i| g.measure(big[i])).sum();
    for &i in &inner {
        num[(i, i)] += g.measure(big[i]);
    }
    for &i in &inner {
        for &j in &inner {
            num[(i, j)] -= g.measure(big[i]) * g.measure(big[j]) / vol;
        }
    }
    let scale = 2.0 * (r as f64).powi(2);
    let mut den = DMatrix::<f64>::zeros(n, n);
    for (i, &v) in big.iter().enumerate() {
        for (u, w) in g.neighbors(v) {
            if let Some(&j) = idx.get(&u) {
                den[(i, i)] += scale * w;
                den[(i, j)] -= scale * w;
            }
        }
    }
    // both forms vanish on constants, so grounding one vertex removes them
    let keep: Vec<usize> = (1..n).collect();
    let a = num.select_rows(&keep).select_columns(&keep);
    let b = den.select_rows(&keep).select_columns(&keep);
    let chol = b.cholesky().ok_or(Error::SingularDirichlet)?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(Error::SingularDirichlet)?;
    let m = &linv * a * linv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(m).eigenvalues;
    Ok(ev.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareProbe {
    pub center: usize,
    pub r: u32,
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub per_ball: Vec<PoincareProbe>,
    pub sup: f64,
}

/// Poincaré constants over every `(center, r)` combination, in parallel.
pub fn poincare_survey(g: &WeightedGraph, centers: &[usize], radii: &[u32]) -> Result<PoincareReport> {
    let jobs: Vec<(usize, u32)> = centers.iter().flat_map(|&c| radii.iter().map(move |&r| (c, r))).collect();
    let per_ball = jobs
        .par_iter()
        .map(|&(center, r)| {
            estimate_poincare_constant(g, center, r).map(|constant| PoincareProbe { center, r, constant })
        })
        .collect::<Result<Vec<_>>>()?;
    let sup = per_ball.iter().map(|p| p.constant).fold(0.0, f64::max);
    Ok(PoincareReport { per_ball, sup })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Covering radius.
    pub m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub random_pairs: usize,
    pub near_radius: u32,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling { random_pairs: 2000, near_radius: 6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceWitness {
    pub u: usize,
    pub v: usize,
    pub rho_a: u32,
    pub rho_b: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughIsometryCertificate {
    pub pairs_checked: usize,
    pub sampling: PairSampling,
    /// Smallest `b` with `a⁻¹ρ − b ≤ ρ′ ≤ aρ + b` on the sample, at the candidate `a`.
    pub b_min: f64,
    /// Smallest `b` at `a = 1`.
    pub b_min_at_one: f64,
    pub distance_witness: Option<DistanceWitness>,
    pub covering_radius: u32,
    /// `max_v max(m′/m, m/m′)`.
    pub c_min: f64,
    pub measure_witness: usize,
    pub candidate: RoughConstants,
    pub rough1: bool,
    pub rough2: bool,
    pub rough3: bool,
}

impl RoughIsometryCertificate {
    pub fn pass(&self) -> bool {
        self.rough1 && self.rough2 && self.rough3
    }
}

fn bounded_bfs(g: &WeightedGraph, src: usize, depth: u32) -> Vec<(usize, u32)> {
    let mut seen = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(src, 0u32);
    queue.push_back(src);
    let mut out = vec![(src, 0)];
    while let Some(u) = queue.pop_front() {
        let du = seen[&u];
        if du == depth {
            continue;
        }
        for (t, _) in g.neighbors(u) {
            if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(t) {
                e.insert(du + 1);
                out.push((t, du + 1));
                queue.push_back(t);
            }
        }
    }
    out
}

/// Audits a vertex map `φ: A → B` against a candidate rough isometry.
pub fn check_rough_isometry(
    ga: &WeightedGraph,
    gb: &WeightedGraph,
    map: &[Option<usize>],
    sampling: PairSampling,
    candidate: RoughConstants,
) -> Result<RoughIsometryCertificate> {
    let na = ga.vertex_count();
    if map.len() != na {
        return Err(Error::LengthMismatch { expected: na, got: map.len() });
    }
    let phi: Vec<usize> = map.iter().enumerate().map(|(v, m)| m.ok_or(Error::PartialMap(v))).collect::<Result<_>>()?;
    if let Some(&bad) = phi.iter().find(|&&u| u >= gb.vertex_count()) {
        return Err(Error::VertexOutOfRange(bad));
    }
    if !(candidate.a >= 1.0) {
        return Err(Error::InvalidParameter("candidate a must be at least 1".into()));
    }

    // near pairs grouped by source, then random pairs
    let mut by_source: Vec<Vec<(usize, Option<u32>)>> = vec![Vec::new(); na];
    for (v, list) in by_source.iter_mut().enumerate() {
        for (u, d) in bounded_bfs(ga, v, sampling.near_radius) {
            if u > v {
                list.push((u, Some(d)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    for _ in 0..sampling.random_pairs {
        let v = rng.random_range(0..na);
        let u = rng.random_range(0..na);
        by_source[v].push((u, None));
    }

    let pairs: Vec<DistanceWitness> = by_source
        .par_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .flat_map_iter(|(v, list)| {
            let need_full = list.iter().any(|(_, d)| d.is_none());
            let da = need_full.then(|| ga.distances_from(v));
            let reach = sampling.near_radius * 4 + 16;
            let local: HashMap<usize, u32> = bounded_bfs(gb, phi[v], reach).into_iter().collect();
            let db_full = if need_full { Some(gb.distances_from(phi[v])) } else { None };
            list.iter()
                .map(|&(u, d)| {
                    let rho_a = d.unwrap_or_else(|| da.as_ref().unwrap()[u]);
                    let rho_b = match local.get(&phi[u]) {
                        Some(&x) => x,
                        None => match &db_full {
                            Some(db) => db[phi[u]],
                            None => gb.distances_from(phi[v])[phi[u]],
                        },
                    };
                    DistanceWitness { u: v, v: u, rho_a, rho_b }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    if pairs.iter().any(|p| p.rho_a == UNREACHABLE || p.rho_b == UNREACHABLE) {
        return Err(Error::Disconnected { components: ga.component_count().max(gb.component_count()) });
    }

    let b_needed = |a: f64, p: &DistanceWitness| {
        let (ra, rb) = (p.rho_a as f64, p.rho_b as f64);
        (rb - a * ra).max(ra / a - rb).max(0.0)
    };
    let mut b_min = 0.0f64;
    let mut b_one = 0.0f64;
    let mut witness = None;
    for p in &pairs {
        let need = b_needed(candidate.a, p);
        if need > b_min {
            b_min = need;
            witness = Some(p.clone());
        }
        b_one = b_one.max(b_needed(1.0, p));
    }

    let covering = gb.distances_from_set(&phi).into_iter().max().unwrap_or(0);
    let mut c_min = 1.0f64;
    let mut measure_witness = 0;
    for (v, &pv) in phi.iter().enumerate() {
        let (ma, mb) = (ga.measure(v), gb.measure(pv));
        if !(ma > 0.0 && mb > 0.0) {
            return Err(Error::IsolatedVertex(v));
        }
        let c = (mb / ma).max(ma / mb);
        if c > c_min {
            c_min = c;
            measure_witness = v;
        }
    }
    Ok(RoughIsometryCertificate {
        pairs_checked: pairs.len(),
        sampling,
        b_min,
        b_min_at_one: b_one,
        distance_witness: witness,
        covering_radius: covering,
        c_min,
        measure_witness,
        candidate,
        rough1: b_min <= candidate.b,
        rough2: covering as f64 <= candidate.m,
        rough3: c_min <= candidate.c,
    })
}

/// Identity map between graphs on the same vertex indexing.
pub fn identity_map(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_lattice_graph, unit_lattice, Edge, EdgeRule, LatticeShape};

    #[test]
    fn two_vertex_poincare() {
        let g = WeightedGraph::new(vec![None, None], vec![Edge { u: 0, v: 1, w: 1.0 }], Boundary::Free).unwrap();
        let c = estimate_poincare_constant(&g, 0, 1).unwrap();
        assert!((c - 0.25).abs() < 1e-14);
    }

    #[test]
    fn poincare_scale_invariant() {
        let g = unit_lattice(LatticeShape::square(21), Boundary::Torus).unwrap();
        let g3 =
            build_lattice_graph(LatticeShape::square(21), EdgeRule::NearestNeighbor, |_| 3.0, Boundary::Torus).unwrap();
        let v = g.central_vertex();
        let a = estimate_poincare_constant(&g, v, 2).unwrap();
        let b = estimate_poincare_constant(&g3, v, 2).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn poincare_guard() {
        let g = unit_lattice(LatticeShape::square(11), Boundary::Free).unwrap();
        assert!(matches!(estimate_poincare_constant(&g, g.central_vertex(), 4), Err(Error::BoundaryGuard(_))));
    }

    #[test]
    fn delta_unit_lattice() {
        let g = unit_lattice(LatticeShape::square(9), Boundary::Free).unwrap();
        let d = check_delta(&g).unwrap();
        assert_eq!(d.alpha, 0.25);
        assert!(d.pass);
    }

    #[test]
    fn delta_degenerate_edge() {
        let g = build_lattice_graph(
            LatticeShape::square(5),
            EdgeRule::NearestNeighbor,
            |e| if e.from.ij() == (0, 0) && e.step == (1, 0) { 1e-15 } else { 1.0 },
            Boundary::Torus,
        )
        .unwrap();
        let d = check_delta(&g).unwrap();
        assert!(d.alpha < 1e-14);
        assert!(!d.pass);
    }

    #[test]
    fn vg_guard_and_counts() {
        let g = unit_lattice(LatticeShape::square(41), Boundary::Free).unwrap();
        let centers = default_centers(&g, 5, 2);
        assert_eq!(centers.len(), 5);
        assert!(check_vg(&g, &centers, &[5, 6, 7, 8, 9, 30]).is_err());
        assert!(check_vg(&g, &centers[..3], &[1, 2, 3, 4, 5, 6]).is_err());
        let rep = check_vg(&g, &centers, &[2, 4, 6, 8, 10, 12]).unwrap();
        assert!(rep.c1 <= rep.c2);
    }

    #[test]
    fn rough_identity_is_trivial() {
        let g = unit_lattice(LatticeShape::square(12), Boundary::Free).unwrap();
        let cert = check_rough_isometry(
            &g,
            &g,
            &identity_map(g.vertex_count()),
            PairSampling { random_pairs: 200, near_radius: 3, seed: 1 },
            RoughConstants { a: 1.0, b: 1e-9, c: 1.0 + 1e-9, m: 1e-9 },
        )
        .unwrap();
        assert!(cert.pass());
        assert_eq!(cert.b_min, 0.0);
        assert_eq!(cert.covering_radius, 0);
        assert_eq!(cert.c_min, 1.0);
    }

    #[test]
    fn partial_map_rejected() {
        let g = unit_lattice(LatticeShape::square(4), Boundary::Free).unwrap();
        let mut map = identity_map(16);
        map[3] = None;
        let r = check_rough_isometry(
            &g,
            &g,
            &map,
            PairSampling::default(),
            RoughConstants { a: 2.0, b: 1.0, c: 2.0, m: 1.0 },
        );
        assert!(matches!(r, Err(Error::PartialMap(3))));
    }
}
