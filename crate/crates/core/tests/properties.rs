use std::f64::consts::PI;

use phaselock::graph::{
    build_lattice_graph, q_form, Boundary, Coord, Edge, EdgeInfo, EdgeRule, LatticeShape, Neighborhoods, Norm,
    StateVector, VertexId, WeightedGraph,
};
use phaselock::heat::HeatSemigroup;
use phaselock::linearize::linearize;
use phaselock::phase::{principal, wrap_lag, Coupling, PhaseLockedSolution, PhaseSystem};
use phaselock::property::{
    check_delta, check_rough_isometry, estimate_poincare_constant, identity_map, PairSampling, RoughConstants,
};
use phaselock::solutions::sector_representative;
use proptest::prelude::*;

fn edge_key(e: &EdgeInfo) -> usize {
    let (i, j) = e.from.ij();
    (i * 7919 + j * 104_729 + e.step.0 * 31 + e.step.1 * 17).unsigned_abs() as usize
}

fn weighted_lattice(n: usize, weights: &[f64], boundary: Boundary, range: usize) -> WeightedGraph {
    let rule = if range == 1 { EdgeRule::NearestNeighbor } else { EdgeRule::Range(range) };
    build_lattice_graph(LatticeShape::square(n), rule, |e| weights[edge_key(e) % weights.len()], boundary).unwrap()
}

fn boundary() -> impl Strategy<Value = Boundary> {
    prop_oneof![Just(Boundary::Free), Just(Boundary::Torus)]
}

fn lattice() -> impl Strategy<Value = WeightedGraph> {
    (5usize..9, prop::collection::vec(0.1f64..3.0, 1..12), boundary(), 1usize..3)
        .prop_map(|(n, w, b, r)| weighted_lattice(n, &w, b, r))
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stored_edges_are_symmetric(g in lattice()) {
        for e in g.edges() {
            prop_assert_eq!(g.weight(e.u, e.v).to_bits(), g.weight(e.v, e.u).to_bits());
        }
    }

    #[test]
    fn laplacian_kills_constants(g in lattice(), c in -5.0f64..5.0) {
        let f = StateVector::constant(g.vertex_count(), c);
        for normalized in [false, true] {
            let y = g.apply_laplacian(&f, normalized).unwrap();
            prop_assert!(y.norm(Norm::Linf) <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn normalized_laplacian_is_bounded(g in lattice(), f in vector(81)) {
        let n = g.vertex_count();
        let f = &f[..n.min(f.len())];
        prop_assume!(f.len() == n);
        let d = g.max_degree() as f64;
        for p in [Norm::L1, Norm::L2, Norm::Linf] {
            let nf = phaselock::graph::lp_norm(f, p);
            prop_assume!(nf > 0.0);
            let unit: Vec<f64> = f.iter().map(|x| x / nf).collect();
            let y = g.apply_laplacian(&unit, true).unwrap();
            prop_assert!(y.norm(p) <= d + 1.0 + 1e-12);
        }
    }

    #[test]
    fn metric_axioms(g in lattice(), a in 0usize..1000, b in 0usize..1000, c in 0usize..1000) {
        let n = g.vertex_count();
        let (a, b, c) = (VertexId(a % n), VertexId(b % n), VertexId(c % n));
        let d = |x, y| g.graph_metric(x, y).unwrap();
        prop_assert_eq!(d(a, a), 0);
        prop_assert_eq!(d(a, b), d(b, a));
        prop_assert!(d(a, c) <= d(a, b) + d(b, c));
    }

    #[test]
    fn balls_are_nested(g in lattice(), v in 0usize..1000) {
        let v = VertexId(v % g.vertex_count());
        prop_assert_eq!(g.ball_volume(v, 0).unwrap(), g.measure(v.0));
        let mut prev = 0.0;
        for r in 0..8 {
            let vol = g.ball_volume(v, r).unwrap();
            prop_assert!(vol >= prev);
            prev = vol;
        }
    }

    #[test]
    fn q_form_is_a_seminorm(g in lattice(), x in vector(81), y in vector(81), c in -3.0f64..3.0) {
        let n = g.vertex_count();
        prop_assume!(x.len() >= n && y.len() >= n);
        let (x, y) = (&x[..n], &y[..n]);
        let nb = Neighborhoods::from_graph(&g);
        let q = |v: &[f64]| q_form(&nb, v).unwrap();
        let sum: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        let shifted: Vec<f64> = x.iter().map(|a| a + c).collect();
        prop_assert!(q(x) >= 0.0);
        prop_assert!((q(&shifted) - q(x)).abs() <= 1e-10 * (1.0 + q(x)));
        prop_assert!((q(&sum).sqrt() - q(x).sqrt()).abs() <= q(y).sqrt() + 1e-10);
        let d = nb.max_size() as f64;
        let l2 = phaselock::graph::lp_norm(x, Norm::L2);
        prop_assert!(q(x) <= 4.0 * d * l2 * l2 + 1e-10);
    }

    #[test]
    fn delta_constant_is_a_lower_bound(g in lattice()) {
        let rep = check_delta(&g).unwrap();
        for v in 0..g.vertex_count() {
            for (_, w) in g.neighbors(v) {
                prop_assert!(w >= rep.alpha * g.measure(v) * (1.0 - 1e-12));
            }
        }
        prop_assert!(rep.alpha >= rep.degree_bound * (1.0 - 1e-12));
    }

    #[test]
    fn identity_is_a_sharp_rough_isometry(g in lattice(), seed in 0u64..100) {
        let sampling = PairSampling { random_pairs: 200, near_radius: 3, seed };
        let cand = RoughConstants { a: 1.0, b: 1e-9, c: 1.0 + 1e-9, m: 1e-9 };
        let cert = check_rough_isometry(&g, &g, &identity_map(g.vertex_count()), sampling, cand).unwrap();
        prop_assert!(cert.pass());
        prop_assert_eq!(cert.b_min_at_one, 0.0);
        prop_assert_eq!(cert.covering_radius, 0);
        prop_assert_eq!(cert.c_min, 1.0);
    }

    #[test]
    fn heat_semigroup_contracts(g in lattice(), x in vector(81), t in 0.0f64..30.0) {
        let n = g.vertex_count();
        prop_assume!(x.len() >= n);
        let heat = HeatSemigroup::from_graph(&g).unwrap();
        let y = heat.apply(&x[..n], t).unwrap();
        for p in [Norm::L1, Norm::L2, Norm::Linf] {
            if p == Norm::L2 && g.measures().iter().any(|&m| (m - g.measure(0)).abs() > 1e-12) {
                continue; // ℓ² contraction needs a constant measure
            }
            prop_assert!(y.norm(p) <= (1.0 + 1e-10) * phaselock::graph::lp_norm(&x[..n], p));
        }
        let row = heat.transition_row(0, t).unwrap();
        prop_assert!((row.row_sum(0) - 1.0).abs() <= 1e-10);
        prop_assert!(row.min_entry() >= -1e-12);
    }

    #[test]
    fn principal_and_wrap_ranges(x in -100.0f64..100.0) {
        let p = principal(x);
        prop_assert!(p > -PI && p <= PI);
        prop_assert!(((x - p) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - p) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        let w = wrap_lag(x);
        prop_assert!((0.0..2.0 * PI).contains(&w));
    }

    #[test]
    fn sector_map_lands_in_sector(i in -60i64..60, j in -60i64..60) {
        let ((a, b), sign, _) = sector_representative(i, j);
        prop_assert!(1 <= b && b <= a);
        prop_assert!(sign == 1.0 || sign == -1.0);
        prop_assert_eq!(a.max(b), i.max(1 - i).max(j).max(1 - j));
    }
}

fn lattice_system(g: WeightedGraph, coupling: Coupling) -> PhaseSystem {
    let n = g.vertex_count();
    PhaseSystem::new(g, coupling, vec![0.4; n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rhs_is_gauge_invariant_and_conservative(lags in vector(49), psi in vector(49), c in -3.0f64..3.0) {
        let g = weighted_lattice(7, &[1.0], Boundary::Torus, 1);
        let sys = lattice_system(g, Coupling::Sine);
        let sol = PhaseLockedSolution::from_lags(&sys, lags, 0.4).unwrap();
        let a = sys.perturbation_rhs(&sol, &psi).unwrap();
        let shifted: Vec<f64> = psi.iter().map(|x| x + c).collect();
        let b = sys.perturbation_rhs(&sol, &shifted).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        // the coupling part sums to zero for odd H
        let zero = sys.perturbation_rhs(&sol, &[0.0; 49]).unwrap();
        let coupling_sum: f64 = a.iter().zip(zero.iter()).map(|(x, z)| x - z).sum();
        prop_assert!(coupling_sum.abs() <= 1e-11);
    }

    #[test]
    fn linearization_matches_directional_derivative(x in vector(49)) {
        let g = weighted_lattice(7, &[1.0], Boundary::Free, 1);
        let sys = lattice_system(g, Coupling::Sine);
        let lags: Vec<f64> = (0..49).map(|v| 0.05 * (v % 5) as f64).collect();
        let sol = PhaseLockedSolution::from_lags(&sys, lags, 0.4).unwrap();
        let lin = sys.linearization_apply(&sol.lags, &x).unwrap();
        let base = sys.perturbation_rhs(&sol, &[0.0; 49]).unwrap();
        let err = |eps: f64| {
            let px: Vec<f64> = x.iter().map(|v| eps * v).collect();
            let r = sys.perturbation_rhs(&sol, &px).unwrap();
            r.iter().zip(base.iter()).zip(lin.iter()).map(|((r, b), l)| ((r - b) / eps - l).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(1e-3), err(1e-4));
        prop_assume!(e1 > 1e-9);
        let slope = (e1 / e2).log10();
        prop_assert!((slope - 1.0).abs() < 0.1, "slope {}", slope);
    }

    #[test]
    fn augmented_measure_is_constant(w in prop::collection::vec(0.2f64..2.0, 1..8)) {
        let g = weighted_lattice(6, &w, Boundary::Free, 1);
        let sys = lattice_system(g, Coupling::Sine);
        let sol = PhaseLockedSolution::from_lags(&sys, vec![0.0; 36], 0.4).unwrap();
        let b = linearize(&sys, &sol).unwrap();
        for v in 0..36 {
            prop_assert!((b.augmented().measure(v) - b.normalization()).abs() <= 1e-12);
        }
        let x: Vec<f64> = (0..36).map(|v| (v as f64).sin()).collect();
        let direct = b.generator_apply(&x).unwrap();
        let looped = b.augmented().apply_laplacian(&x, true).unwrap();
        for (p, q) in direct.iter().zip(looped.iter()) {
            prop_assert!((p - q).abs() <= 1e-14);
        }
    }

    #[test]
    fn extra_edge_never_raises_poincare_constant(k in 1u32..3, pick in 0usize..100, eps in 0.05f64..1.0) {
        // unit torus with loops of weight 2 so that measures can be held fixed
        let base = weighted_lattice(9, &[1.0], Boundary::Torus, 1);
        let center = base.vertex_at(Coord::Plane(0, 0)).unwrap().0;
        let mut edges: Vec<Edge> = base.edges().to_vec();
        edges.extend((0..81).map(|v| Edge { u: v, v, w: 2.0 }));
        let g0 = WeightedGraph::new(base.coords().to_vec(), edges.clone(), Boundary::Torus).unwrap();
        let d = g0.distances_from(center);
        let sphere: Vec<usize> = (0..81).filter(|&v| d[v] == k).collect();
        let (u, v) = (sphere[pick % sphere.len()], sphere[(pick / sphere.len() + 1 + pick) % sphere.len()]);
        prop_assume!(u != v && g0.weight(u, v) == 0.0);
        for e in edges.iter_mut().filter(|e| e.u == e.v && (e.u == u || e.u == v)) {
            e.w -= eps;
        }
        edges.push(Edge { u: u.min(v), v: u.max(v), w: eps });
        let g1 = WeightedGraph::new(base.coords().to_vec(), edges, Boundary::Torus).unwrap();
        for (a, b) in g0.measures().iter().zip(g1.measures()) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
        let r = 2;
        let c0 = estimate_poincare_constant(&g0, center, r).unwrap();
        let c1 = estimate_poincare_constant(&g1, center, r).unwrap();
        prop_assert!(c1 <= c0 * (1.0 + 1e-9), "{} > {}", c1, c0);
    }
}
