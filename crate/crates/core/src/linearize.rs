//! Linearization about a phase-locked solution and the induced graph.
//!
//! The linearized operator is `[L x]_v = Σ_{v'∈N(v)} H′(θ̄_v' − θ̄_v)(x_v' − x_v)`,
//! the unnormalized Laplacian of the graph with weights `H′` at the lag
//! differences. Dividing by `M + 1` and adding loops of weight
//! `1 + M − m(v)` turns it into the normalized Laplacian of a graph whose
//! measure is identically `M + 1`. When `m` is already constant the loops
//! are skipped and the divisor is `m` itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, GraphJson, StateVector, WeightedGraph, UNREACHABLE};
use crate::phase::{principal, PhaseLockedSolution, PhaseSystem};

pub const WEIGHT_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct InducedGraphBundle {
    base: WeightedGraph,
    augmented: WeightedGraph,
    m_max: f64,
    normalization: f64,
    loops_added: bool,
}

impl InducedGraphBundle {
    /// Graph with weights `H′` at lag differences, no loops.
    pub fn base(&self) -> &WeightedGraph {
        &self.base
    }

    /// Base graph plus loops; equal to `base` when no loops were needed.
    pub fn augmented(&self) -> &WeightedGraph {
        &self.augmented
    }

    /// `M = max_v m(v)` on the base graph.
    pub fn m_max(&self) -> f64 {
        self.m_max
    }

    /// `M + 1`, or the common measure when no loops were added.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn loops_added(&self) -> bool {
        self.loops_added
    }

    pub fn vertex_count(&self) -> usize {
        self.base.vertex_count()
    }

    /// `L̃x = L x / normalization`.
    pub fn generator_apply(&self, x: &[f64]) -> Result<StateVector> {
        let mut y = self.base.apply_laplacian(x, false)?;
        let c = self.normalization;
        y.iter_mut().for_each(|v| *v /= c);
        Ok(y)
    }

    pub fn to_json(&self) -> BundleJson {
        BundleJson { graph: self.augmented.to_json(), m_max: self.m_max, loops: self.loops_added }
    }
}

/// Graph JSON with the normalization header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleJson {
    #[serde(flatten)]
    pub graph: GraphJson,
    #[serde(rename = "M")]
    pub m_max: f64,
    pub loops: bool,
}

pub fn linearize(sys: &PhaseSystem, sol: &PhaseLockedSolution) -> Result<InducedGraphBundle> {
    linearize_with(sys, sol, WEIGHT_EPSILON)
}

pub fn linearize_with(sys: &PhaseSystem, sol: &PhaseLockedSolution, weight_epsilon: f64) -> Result<InducedGraphBundle> {
    let n = sys.vertex_count();
    if sol.lags.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: sol.lags.len() });
    }
    let h = sys.coupling();
    let lags = &sol.lags;
    let mut edges = Vec::new();
    for (v, u) in sys.neighborhoods().pairs() {
        let forward = h.dh(principal(lags[u] - lags[v]));
        let backward = h.dh(principal(lags[v] - lags[u]));
        if (forward - backward).abs() > WEIGHT_EPSILON {
            return Err(Error::Hypothesis(format!(
                "weight asymmetry on pair ({v}, {u}): H' gives {forward} and {backward}"
            )));
        }
        if forward < -weight_epsilon {
            return Err(Error::Hypothesis(format!("negative weight H' = {forward} on pair ({v}, {u})")));
        }
        if forward.abs() >= weight_epsilon {
            edges.push(Edge { u: v, v: u, w: forward });
        }
    }
    let coords = sys.topology().coords().to_vec();
    let boundary = sys.boundary();
    let base = WeightedGraph::new(coords.clone(), edges.clone(), boundary)?;
    let m = base.measures();
    let m_max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m_min = m.iter().copied().fold(f64::INFINITY, f64::min);
    if !(m_max > 0.0) {
        return Err(Error::NoEdges);
    }
    if m_max - m_min <= 1e-12 * m_max {
        return Ok(InducedGraphBundle {
            augmented: base.clone(),
            base,
            m_max,
            normalization: m_max,
            loops_added: false,
        });
    }
    let mut aug = edges;
    aug.extend((0..n).map(|v| Edge { u: v, v, w: 1.0 + m_max - m[v] }));
    let augmented = WeightedGraph::new(coords, aug, boundary)?;
    Ok(InducedGraphBundle { base, augmented, m_max, normalization: m_max + 1.0, loops_added: true })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightWitness {
    pub u: usize,
    pub v: usize,
    pub forward: f64,
    pub backward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    /// `D = max_v |N(v)|`.
    pub max_degree: usize,
    pub min_degree: usize,
    pub bounded_degree: bool,
    pub negative_pairs: Vec<WeightWitness>,
    pub asymmetric_pairs: Vec<WeightWitness>,
    pub weights_ok: bool,
    pub components: usize,
    pub connected: bool,
    /// `sup ρ(v, v')` over influence pairs, on the positive-weight graph.
    pub metric_sup: Option<u32>,
    pub metric_sup_witness: Option<(usize, usize)>,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.bounded_degree && self.weights_ok && self.connected && self.metric_sup.is_some()
    }
}

/// Audits degree bound, weight symmetry/positivity and connectivity.
/// Failures are reported, never raised.
pub fn check_hypotheses(sys: &PhaseSystem, sol: &PhaseLockedSolution) -> Result<HypothesisReport> {
    let n = sys.vertex_count();
    if sol.lags.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: sol.lags.len() });
    }
    let nb = sys.neighborhoods();
    let h = sys.coupling();
    let mut negative_pairs = Vec::new();
    let mut asymmetric_pairs = Vec::new();
    let mut edges = Vec::new();
    for (v, u) in nb.pairs() {
        let forward = h.dh(principal(sol.lags[u] - sol.lags[v]));
        let backward = h.dh(principal(sol.lags[v] - sol.lags[u]));
        let wit = WeightWitness { u: v, v: u, forward, backward };
        if (forward - backward).abs() >= WEIGHT_EPSILON {
            asymmetric_pairs.push(wit.clone());
        }
        if forward.min(backward) < -WEIGHT_EPSILON {
            negative_pairs.push(wit);
        } else if forward >= WEIGHT_EPSILON {
            edges.push(Edge { u: v, v: u, w: forward });
        }
    }
    let g = WeightedGraph::new(vec![None; n], edges, sys.boundary())?;
    let components = g.component_count();
    let connected = components == 1;
    let (mut metric_sup, mut witness) = (None, None);
    if connected {
        let mut best = 0u32;
        for v in 0..n {
            let d = g.distances_from(v);
            for &u in nb.of(v) {
                if d[u] != UNREACHABLE && d[u] > best {
                    best = d[u];
                    witness = Some((v, u));
                }
            }
        }
        metric_sup = Some(best);
    }
    let (max_degree, min_degree) = (nb.max_size(), nb.min_size());
    Ok(HypothesisReport {
        max_degree,
        min_degree,
        bounded_degree: min_degree >= 1,
        weights_ok: negative_pairs.is_empty() && asymmetric_pairs.is_empty(),
        negative_pairs,
        asymmetric_pairs,
        components,
        connected,
        metric_sup,
        metric_sup_witness: witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Boundary, Coord, EdgeRule, LatticeShape};
    use crate::phase::Coupling;

    fn trivial(n: usize, b: Boundary) -> (PhaseSystem, PhaseLockedSolution) {
        let sys =
            PhaseSystem::lattice(LatticeShape::square(n), EdgeRule::NearestNeighbor, b, Coupling::Sine, 0.0).unwrap();
        let sol = PhaseLockedSolution::from_lags(&sys, vec![0.0; n * n], 0.0).unwrap();
        (sys, sol)
    }

    #[test]
    fn trivial_free_lattice_needs_loops() {
        let (sys, sol) = trivial(7, Boundary::Free);
        let b = linearize(&sys, &sol).unwrap();
        assert!(b.loops_added());
        assert_eq!(b.m_max(), 4.0);
        assert_eq!(b.normalization(), 5.0);
        for v in 0..49 {
            assert!((b.augmented().measure(v) - 5.0).abs() < 1e-12);
        }
        let c = sys.topology().vertex_at(Coord::Plane(0, 0)).unwrap().0;
        let y = b.generator_apply(&StateVector::indicator(49, c)).unwrap();
        assert_eq!(y[c], -0.8);
        assert_eq!(y.iter().filter(|&&x| x == 0.2).count(), 4);
    }

    #[test]
    fn trivial_torus_is_first_case() {
        let (sys, sol) = trivial(6, Boundary::Torus);
        let b = linearize(&sys, &sol).unwrap();
        assert!(!b.loops_added());
        assert_eq!(b.normalization(), 4.0);
        assert!(b.base().edges().iter().all(|e| e.w == 1.0));
    }

    #[test]
    fn negative_weight_is_a_violation() {
        let g = crate::graph::unit_lattice(LatticeShape::Chain(3), Boundary::Free).unwrap();
        let sys = PhaseSystem::new(g, Coupling::Sine, vec![0.0; 3]).unwrap();
        let sol =
            PhaseLockedSolution { lags: vec![0.0, 0.0, 3.0].into(), big_omega: 0.0, residual: 0.0, iterations: 0 };
        assert!(matches!(linearize(&sys, &sol), Err(Error::Hypothesis(_))));
        let rep = check_hypotheses(&sys, &sol).unwrap();
        assert!(!rep.weights_ok);
        assert_eq!(rep.negative_pairs.len(), 1);
        assert_eq!((rep.negative_pairs[0].u, rep.negative_pairs[0].v), (1, 2));
        assert!(!rep.connected);
    }

    #[test]
    fn trivial_hypotheses_pass() {
        let (sys, sol) = trivial(9, Boundary::Free);
        let rep = check_hypotheses(&sys, &sol).unwrap();
        assert!(rep.all_pass());
        assert_eq!(rep.max_degree, 4);
        assert_eq!(rep.metric_sup, Some(1));
    }

    #[test]
    fn bundle_json_header() {
        let (sys, sol) = trivial(4, Boundary::Free);
        let b = linearize(&sys, &sol).unwrap();
        let text = serde_json::to_string(&b.to_json()).unwrap();
        assert!(text.contains("\"M\":4.0"));
        assert!(text.contains("\"loops\":true"));
        let back: BundleJson = serde_json::from_str(&text).unwrap();
        let g = WeightedGraph::from_json(&back.graph).unwrap();
        assert_eq!(g.measures(), b.augmented().measures());
    }
}
