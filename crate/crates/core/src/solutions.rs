//! Concrete phase-locked families on lattice truncations.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Boundary, Coord, EdgeRule, LatticeShape};
use crate::phase::{
    principal, Coupling, LagConstraints, LagReduction, NewtonOptions, PhaseLockedSolution, PhaseSystem, Slot,
};

/// Residual threshold every constructor must meet.
pub const SOLUTION_TOL: f64 = 1e-10;

/// `θ̄ ≡ 0`, with `Ω` the common intrinsic frequency.
pub fn trivial_lags(sys: &PhaseSystem) -> Result<PhaseLockedSolution> {
    let h0 = sys.coupling().h(0.0);
    if h0.abs() > 1e-14 {
        return Err(Error::Coupling(format!("H(0) = {h0} ≠ 0, so equal lags are not phase-locked")));
    }
    let omega = sys
        .uniform_omega()
        .ok_or_else(|| Error::InvalidParameter("equal lags need identical intrinsic frequencies".into()))?;
    PhaseLockedSolution::from_lags(sys, vec![0.0; sys.vertex_count()], omega)
}

/// Sine-coupled identical oscillators on a nearest-neighbor square lattice.
pub fn sine_lattice(extent: usize, boundary: Boundary, omega: f64) -> Result<PhaseSystem> {
    PhaseSystem::lattice(LatticeShape::square(extent), EdgeRule::NearestNeighbor, boundary, Coupling::Sine, omega)
}

/// `θ̄_{i,j} = 2π[i]_{N1}/N1 + 2π[j]_{N2}/N2` on a torus.
pub fn doubly_periodic_lags(sys: &PhaseSystem, n1: usize, n2: usize) -> Result<PhaseLockedSolution> {
    for n in [n1, n2] {
        if n < 5 {
            return Err(Error::InvalidParameter(format!(
                "period {n} < 5: neighboring lags would differ by 2π/{n} ≥ π/2, so cos(2π/{n}) ≤ 0 and edges vanish"
            )));
        }
    }
    let g = sys.topology();
    if g.boundary() != Boundary::Torus {
        return Err(Error::InvalidParameter("doubly periodic lags need a torus".into()));
    }
    let (ex, ey) = g.extents().ok_or_else(|| Error::InvalidParameter("topology has no lattice labels".into()))?;
    if ex % n1 != 0 {
        return Err(Error::IncompatiblePeriod { extent: ex, period: n1 });
    }
    if ey % n2 != 0 {
        return Err(Error::IncompatiblePeriod { extent: ey, period: n2 });
    }
    let lags = g
        .coords()
        .iter()
        .map(|c| match c {
            Some(Coord::Plane(i, j)) => {
                TAU * i.rem_euclid(n1 as i64) as f64 / n1 as f64 + TAU * j.rem_euclid(n2 as i64) as f64 / n2 as f64
            }
            _ => f64::NAN,
        })
        .collect::<Vec<_>>();
    if lags.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidParameter("doubly periodic lags need planar coordinates".into()));
    }
    let omega = sys
        .uniform_omega()
        .ok_or_else(|| Error::InvalidParameter("identical intrinsic frequencies required".into()))?;
    PhaseLockedSolution::from_lags(sys, lags, omega)
}

/// Range-`n` chain of identical sine oscillators with its equal-lag solution.
pub fn chain_lags(n_range: usize, extent: usize, omega: f64) -> Result<(PhaseSystem, PhaseLockedSolution)> {
    if n_range == 0 {
        return Err(Error::InvalidParameter("influence range must be at least 1".into()));
    }
    if extent < 2 * n_range + 1 {
        return Err(Error::ExtentTooSmall {
            extent,
            reason: format!("range {n_range} needs extent >= {}", 2 * n_range + 1),
        });
    }
    let rule = if n_range == 1 { EdgeRule::NearestNeighbor } else { EdgeRule::Range(n_range) };
    let sys = PhaseSystem::lattice(LatticeShape::Chain(extent), rule, Boundary::Free, Coupling::Sine, omega)?;
    let sol = trivial_lags(&sys)?;
    Ok((sys, sol))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatingWaveSpec {
    /// Even lattice extent; indices run over `-(K-1) ..= K` with `K = extent/2`.
    pub extent: usize,
    pub omega: f64,
    pub newton: NewtonOptions,
}

impl RotatingWaveSpec {
    pub fn new(extent: usize) -> Self {
        RotatingWaveSpec { extent, omega: 0.0, newton: NewtonOptions::default() }
    }
}

/// Representative of `(i, j)` in the sector `1 ≤ j ≤ i` together with the
/// affine lag map: `θ(i,j) = sign · θ(rep) + offset`.
pub fn sector_representative(i: i64, j: i64) -> ((i64, i64), f64, f64) {
    let (mut i, mut j) = (i, j);
    let (mut sign, mut offset) = (1.0, 0.0);
    if j <= 0 {
        // reflection across j = 1/2: θ(i, 1−j) = π/2 − θ(i, j)
        j = 1 - j;
        offset += sign * FRAC_PI_2;
        sign = -sign;
    }
    if i <= 0 {
        // reflection across i = 1/2: θ(1−i, j) = −π/2 − θ(i, j)
        i = 1 - i;
        offset -= sign * FRAC_PI_2;
        sign = -sign;
    }
    if j > i {
        // diagonal reflection: θ(j, i) = −θ(i, j)
        std::mem::swap(&mut i, &mut j);
        sign = -sign;
    }
    ((i, j), sign, offset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorCheck {
    /// Rings excluded at the truncation edge.
    pub excluded_rings: usize,
    pub max_interior_residual: f64,
    pub diagonal_max: f64,
    pub reflection_max: f64,
    pub bound_violation: f64,
    pub monotonicity_violation: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    pub centre_weight_max: f64,
    /// `inf` and `sup` of `cos` over sector-interior nearest-neighbor pairs.
    pub weight_inf: f64,
    pub weight_sup: f64,
}

#[derive(Clone, Debug)]
pub struct RotatingWave {
    pub system: PhaseSystem,
    pub solution: PhaseLockedSolution,
    pub check: SectorCheck,
}

/// Rotating wave on a free even-extent lattice, solved on the fundamental
/// sector under the four-fold symmetry and verified afterwards.
pub fn rotating_wave_lags(spec: &RotatingWaveSpec) -> Result<RotatingWave> {
    let n = spec.extent;
    if n < 8 {
        return Err(Error::ExtentTooSmall { extent: n, reason: "rotating wave needs extent >= 8".into() });
    }
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "rotating wave needs an even extent (symmetric about 1/2), got {n}"
        )));
    }
    let system = sine_lattice(n, Boundary::Free, spec.omega)?;
    let g = system.topology();
    let k = (n / 2) as i64;

    let mut unknown_of = std::collections::HashMap::new();
    let mut equations = Vec::new();
    for i in 2..=k {
        for j in 1..i {
            unknown_of.insert((i, j), unknown_of.len());
            equations.push(g.vertex_at(Coord::Plane(i, j)).expect("sector inside lattice").0);
        }
    }
    let mut slots = Vec::with_capacity(g.vertex_count());
    let mut seed = Vec::with_capacity(g.vertex_count());
    for c in g.coords() {
        let (i, j) = c.expect("lattice coordinates").ij();
        let (rep, sign, offset) = sector_representative(i, j);
        let base = FRAC_PI_4 - ((rep.1 as f64 - 0.5).atan2(rep.0 as f64 - 0.5));
        if rep.0 == rep.1 {
            slots.push(Slot::Fixed(offset));
            seed.push(offset);
        } else {
            slots.push(Slot::Tied { unknown: unknown_of[&rep], sign, offset });
            seed.push(sign * base + offset);
        }
    }
    let reduction = LagReduction { slots, equations, unknowns: unknown_of.len() };
    let solution = system.solve_phase_locked(&seed, spec.omega, &LagConstraints::Reduced(reduction), spec.newton)?;
    let check = verify_rotating_wave(&system, &solution, 2)?;
    Ok(RotatingWave { system, solution, check })
}

/// Post-hoc verification of the sector relations, away from the outermost
/// `rings` rings. Errors carry the first offending index.
pub fn verify_rotating_wave(sys: &PhaseSystem, sol: &PhaseLockedSolution, rings: usize) -> Result<SectorCheck> {
    let g = sys.topology();
    let (n, _) = g.extents().ok_or_else(|| Error::InvalidParameter("unlabelled topology".into()))?;
    let k = (n / 2) as i64;
    let inner = k - rings as i64;
    let theta = |i: i64, j: i64| sol.lags[g.vertex_at(Coord::Plane(i, j)).expect("index in lattice").0];
    let fail = |what: &str, i: i64, j: i64| Error::Invariant { what: what.to_string(), witness: format!("({i},{j})") };
    const TOL: f64 = 1e-10;

    let residual = sys.phase_lag_residual(&sol.lags, sol.big_omega)?;
    let mut max_res = 0.0f64;
    for (v, c) in g.coords().iter().enumerate() {
        let (i, j) = c.unwrap().ij();
        if i.max(1 - i) <= inner && j.max(1 - j) <= inner {
            max_res = max_res.max(residual[v].abs());
        }
    }
    if max_res >= TOL {
        return Err(Error::Invariant { what: format!("interior residual {max_res:.3e}"), witness: "interior".into() });
    }

    let mut chk = SectorCheck {
        excluded_rings: rings,
        max_interior_residual: max_res,
        diagonal_max: 0.0,
        reflection_max: 0.0,
        bound_violation: 0.0,
        monotonicity_violation: 0.0,
        gap_min: f64::INFINITY,
        gap_max: f64::NEG_INFINITY,
        centre_weight_max: 0.0,
        weight_inf: f64::INFINITY,
        weight_sup: f64::NEG_INFINITY,
    };
    for i in 1..=inner {
        let d = principal(theta(i, i)).abs();
        chk.diagonal_max = chk.diagonal_max.max(d);
        if d > TOL {
            return Err(fail("diagonal lag is not 0", i, i));
        }
        let r = principal(theta(i, 0) - FRAC_PI_2 + theta(i, 1)).abs();
        chk.reflection_max = chk.reflection_max.max(r);
        if r > TOL {
            return Err(fail("θ(i,0) ≠ π/2 − θ(i,1)", i, 0));
        }
        if i >= 2 {
            let gap = principal(theta(i, 0) - theta(i, 1));
            chk.gap_min = chk.gap_min.min(gap);
            chk.gap_max = chk.gap_max.max(gap);
            if !(-TOL..FRAC_PI_2).contains(&gap) {
                return Err(fail("θ(i,0) − θ(i,1) outside [0, π/2)", i, 0));
            }
        }
        for j in 1..i {
            let t = theta(i, j);
            let v = (-t).max(t - FRAC_PI_4);
            chk.bound_violation = chk.bound_violation.max(v);
            if !(t > 0.0) || t > FRAC_PI_4 + TOL {
                return Err(fail("sector lag outside (0, π/4]", i, j));
            }
            if i < inner {
                let m = t - theta(i + 1, j);
                chk.monotonicity_violation = chk.monotonicity_violation.max(m);
                if m > TOL {
                    return Err(fail("sector lags decrease in i", i, j));
                }
            }
        }
    }
    let h = sys.coupling();
    for (a, b) in [((0, 0), (1, 0)), ((1, 0), (1, 1)), ((1, 1), (0, 1)), ((0, 1), (0, 0))] {
        let w = h.dh(principal(theta(b.0, b.1) - theta(a.0, a.1))).abs();
        chk.centre_weight_max = chk.centre_weight_max.max(w);
    }
    for i in 1..=inner {
        for j in 1..=i {
            for (di, dj) in [(1, 0), (0, 1)] {
                let (i2, j2) = (i + di, j + dj);
                if i2 > inner || j2 > i2 {
                    continue;
                }
                let w = h.dh(principal(theta(i2, j2) - theta(i, j)));
                chk.weight_inf = chk.weight_inf.min(w);
                chk.weight_sup = chk.weight_sup.max(w);
            }
        }
    }
    Ok(chk)
}

/// `max |θ_a − θ_b|` over indices within `radius` of the core, for two
/// truncation sizes.
pub fn truncation_drift(a: &RotatingWave, b: &RotatingWave, radius: i64) -> f64 {
    let (ga, gb) = (a.system.topology(), b.system.topology());
    let mut drift = 0.0f64;
    for i in (1 - radius)..=radius {
        for j in (1 - radius)..=radius {
            if let (Some(va), Some(vb)) = (ga.vertex_at(Coord::Plane(i, j)), gb.vertex_at(Coord::Plane(i, j))) {
                drift = drift.max(principal(a.solution.lags[va.0] - b.solution.lags[vb.0]).abs());
            }
        }
    }
    drift
}

/// `(i, j, θ)` rows for plotting a lag field.
pub fn lag_field(sys: &PhaseSystem, sol: &PhaseLockedSolution) -> Vec<(i64, i64, f64)> {
    sys.topology()
        .coords()
        .iter()
        .zip(sol.lags.iter())
        .filter_map(|(c, &t)| c.map(|c| (c.ij().0, c.ij().1, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Norm;
    use crate::linearize::linearize;
    use std::f64::consts::PI;

    #[test]
    fn sector_core_values() {
        let val = |i, j| {
            let (rep, s, o) = sector_representative(i, j);
            assert_eq!(rep, (1, 1));
            crate::phase::wrap_lag(s * 0.0 + o)
        };
        assert_eq!(val(1, 1), 0.0);
        assert_eq!(val(1, 0), FRAC_PI_2);
        assert_eq!(val(0, 0), PI);
        assert_eq!(val(0, 1), 3.0 * FRAC_PI_2);
    }

    #[test]
    fn quarter_turn_shifts_lag() {
        // rotation about (1/2, 1/2): (i, j) -> (1 − j, i)
        for (i, j) in [(3, 1), (5, 2), (4, 4), (7, 6)] {
            let (r1, s1, o1) = sector_representative(i, j);
            let (r2, s2, o2) = sector_representative(1 - j, i);
            assert_eq!(r1, r2);
            if r1.0 != r1.1 {
                assert_eq!(s1, s2);
            }
            assert!((principal(o2 - o1).abs() - FRAC_PI_2).abs() < 1e-15);
        }
    }

    #[test]
    fn doubly_periodic_examples() {
        let sys = sine_lattice(10, Boundary::Torus, 0.7).unwrap();
        let sol = doubly_periodic_lags(&sys, 5, 5).unwrap();
        assert!(sol.residual < 1e-14);
        let b = linearize(&sys, &sol).unwrap();
        let w = (2.0 * PI / 5.0).cos();
        assert!(b.base().edges().iter().all(|e| (e.w - w).abs() < 1e-15));
        assert!((w - 0.309016994).abs() < 1e-9);

        let sys = sine_lattice(24, Boundary::Torus, 0.0).unwrap();
        let sol = doubly_periodic_lags(&sys, 6, 8).unwrap();
        assert!(sol.residual < 1e-14);
        let b = linearize(&sys, &sol).unwrap();
        let horiz = b.base().edges().iter().find(|e| {
            let (a, c) = (b.base().coord(e.u).unwrap().ij(), b.base().coord(e.v).unwrap().ij());
            a.1 == c.1
        });
        assert!((horiz.unwrap().w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn doubly_periodic_rejections() {
        let sys = sine_lattice(12, Boundary::Torus, 0.0).unwrap();
        assert!(matches!(doubly_periodic_lags(&sys, 4, 6), Err(Error::InvalidParameter(_))));
        assert!(matches!(doubly_periodic_lags(&sys, 5, 6), Err(Error::IncompatiblePeriod { .. })));
        let free = sine_lattice(10, Boundary::Free, 0.0).unwrap();
        assert!(doubly_periodic_lags(&free, 5, 5).is_err());
    }

    #[test]
    fn trivial_requires_odd_at_zero() {
        let g = crate::graph::unit_lattice(LatticeShape::square(4), Boundary::Torus).unwrap();
        let sys = PhaseSystem::new(g, Coupling::fourier(vec![0.2], vec![0.0, 1.0]).unwrap(), vec![0.0; 16]).unwrap();
        assert!(matches!(trivial_lags(&sys), Err(Error::Coupling(_))));
    }

    #[test]
    fn small_rotating_wave() {
        let rw = rotating_wave_lags(&RotatingWaveSpec::new(16)).unwrap();
        assert!(rw.solution.residual < 1e-10);
        assert!(rw.check.centre_weight_max < 1e-12);
        assert!(rw.check.weight_inf > 0.0 && rw.check.weight_sup <= 1.0);
        let full = rw.system.phase_lag_residual(&rw.solution.lags, 0.0).unwrap();
        assert!(full.norm(Norm::Linf) < 1e-10);
        assert!(rotating_wave_lags(&RotatingWaveSpec::new(15)).is_err());
    }

    #[test]
    fn chain_needs_room() {
        assert!(chain_lags(3, 6, 0.0).is_err());
        let (sys, sol) = chain_lags(2, 11, 0.0).unwrap();
        assert_eq!(sys.neighborhoods().max_size(), 4);
        assert_eq!(sol.residual, 0.0);
    }
}
