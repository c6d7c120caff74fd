//! Coupled phase model, phase-locked solutions and perturbation dynamics.
//!
//! The model is `θ̇_v = ω_v + Σ_{v'∈N(v)} H(θ_v' − θ_v)`. A phase-locked
//! solution `θ_v = Ω t + θ̄_v` solves the lag equation
//! `(ω_v − Ω) + Σ H(θ̄_v' − θ̄_v) = 0`, and a perturbation `ψ` of it obeys
//! `ψ̇_v = (ω_v − Ω) + Σ H(θ̄_v' + ψ_v' − θ̄_v − ψ_v)`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_lattice_graph, lp_norm, q_form, Boundary, EdgeRule, LatticeShape, Neighborhoods, Norm, StateVector,
    WeightedGraph,
};
use crate::linalg::{conjugate_gradient, dense_solve, gmres, CsrMatrix, KrylovOptions};
use crate::linearize::InducedGraphBundle;

const PAR_THRESHOLD: usize = 8192;
const DENSE_LIMIT: usize = 3000;

/// Principal value of an angle in `(−π, π]`.
pub fn principal(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Angle reduced to `[0, 2π)`.
pub fn wrap_lag(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Coupling function `H` with its first two derivatives.
#[derive(Clone)]
pub enum Coupling {
    Sine,
    /// `H(x) = Σ_k a_k cos(kx) + b_k sin(kx)`, `k = 0, 1, ...`
    Fourier {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    /// User supplied `(H, H′, H″)`.
    Custom {
        h: ScalarFn,
        dh: ScalarFn,
        ddh: ScalarFn,
    },
}

impl fmt::Debug for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coupling::Sine => write!(f, "Sine"),
            Coupling::Fourier { a, b } => f.debug_struct("Fourier").field("a", a).field("b", b).finish(),
            Coupling::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl Coupling {
    pub fn fourier(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.is_empty() && b.is_empty() {
            return Err(Error::Coupling("empty Fourier table".into()));
        }
        if a.iter().chain(&b).any(|c| !c.is_finite()) {
            return Err(Error::Coupling("non-finite Fourier coefficient".into()));
        }
        Ok(Coupling::Fourier { a, b })
    }

    pub fn custom(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dh: impl Fn(f64) -> f64 + Send + Sync + 'static,
        ddh: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coupling::Custom { h: Arc::new(h), dh: Arc::new(dh), ddh: Arc::new(ddh) }
    }

    fn fourier_eval(a: &[f64], b: &[f64], x: f64, order: u32) -> f64 {
        let n = a.len().max(b.len());
        let mut s = 0.0;
        for k in 0..n {
            let kf = k as f64;
            let (c, sn) = ((kf * x).cos(), (kf * x).sin());
            let ak = a.get(k).copied().unwrap_or(0.0);
            let bk = b.get(k).copied().unwrap_or(0.0);
            s += match order {
                0 => ak * c + bk * sn,
                1 => kf * (-ak * sn + bk * c),
                _ => -kf * kf * (ak * c + bk * sn),
            };
        }
        s
    }

    pub fn h(&self, x: f64) -> f64 {
        match self {
            Coupling::Sine => x.sin(),
            Coupling::Fourier { a, b } => Self::fourier_eval(a, b, x, 0),
            Coupling::Custom { h, .. } => h(x),
        }
    }

    pub fn dh(&self, x: f64) -> f64 {
        match self {
            Coupling::Sine => x.cos(),
            Coupling::Fourier { a, b } => Self::fourier_eval(a, b, x, 1),
            Coupling::Custom { dh, .. } => dh(x),
        }
    }

    pub fn ddh(&self, x: f64) -> f64 {
        match self {
            Coupling::Sine => -x.sin(),
            Coupling::Fourier { a, b } => Self::fourier_eval(a, b, x, 2),
            Coupling::Custom { ddh, .. } => ddh(x),
        }
    }

    fn samples() -> impl Iterator<Item = f64> {
        (0..64).map(|k| -PI + TAU * (k as f64 + 0.37) / 64.0)
    }

    /// Checks `H(x + 2π) = H(x)` on sample points.
    pub fn check_periodic(&self) -> Result<()> {
        for x in Self::samples() {
            for (f, name) in [(self.h(x) - self.h(x + TAU), "H"), (self.dh(x) - self.dh(x + TAU), "H'")] {
                if !(f.abs() <= 1e-12) {
                    return Err(Error::Coupling(format!("{name} is not 2π-periodic at x = {x:.4}")));
                }
            }
        }
        Ok(())
    }

    /// `H(−x) = −H(x)` on sample points.
    pub fn is_odd(&self) -> bool {
        match self {
            Coupling::Sine => true,
            _ => Self::samples().chain([0.0]).all(|x| (self.h(x) + self.h(-x)).abs() <= 1e-13),
        }
    }

    /// Upper bound on `sup |H″|` over `[lo, hi]`.
    pub fn sup_abs_ddh(&self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        match self {
            Coupling::Sine => {
                if hi - lo >= PI {
                    return 1.0;
                }
                // |sin| peaks at π/2 + kπ
                let k = ((lo - PI / 2.0) / PI).ceil();
                if PI / 2.0 + k * PI <= hi {
                    1.0
                } else {
                    lo.sin().abs().max(hi.sin().abs())
                }
            }
            Coupling::Fourier { a, b } => {
                let n = 512;
                let step = (hi - lo) / n as f64;
                let lip: f64 = (0..a.len().max(b.len()))
                    .map(|k| {
                        let kf = k as f64;
                        kf.powi(3) * (a.get(k).unwrap_or(&0.0).abs() + b.get(k).unwrap_or(&0.0).abs())
                    })
                    .sum();
                let m = (0..=n).map(|i| self.ddh(lo + step * i as f64).abs()).fold(0.0, f64::max);
                m + lip * step / 2.0
            }
            Coupling::Custom { .. } => {
                let n = 4096;
                let step = (hi - lo) / n as f64;
                (0..=n).map(|i| self.ddh(lo + step * i as f64).abs()).fold(0.0, f64::max)
            }
        }
    }

    fn tag(&self) -> Result<(String, Option<FourierTable>)> {
        match self {
            Coupling::Sine => Ok(("sin".into(), None)),
            Coupling::Fourier { a, b } => Ok(("table".into(), Some(FourierTable { cos: a.clone(), sin: b.clone() }))),
            Coupling::Custom { .. } => Err(Error::Coupling("custom coupling functions cannot be serialized".into())),
        }
    }

    fn from_tag(tag: &str, table: Option<&FourierTable>) -> Result<Self> {
        match (tag, table) {
            ("sin", _) => Ok(Coupling::Sine),
            ("table", Some(t)) => Coupling::fourier(t.cos.clone(), t.sin.clone()),
            ("table", None) => Err(Error::Coupling("H = \"table\" requires a coefficient table".into())),
            (other, _) => Err(Error::Coupling(format!("unknown coupling '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTable {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Vertex set, influence sets, coupling and intrinsic frequencies.
#[derive(Clone, Debug)]
pub struct PhaseSystem {
    topology: WeightedGraph,
    nbhd: Neighborhoods,
    coupling: Coupling,
    omega: Vec<f64>,
}

impl PhaseSystem {
    /// Influence sets are the non-loop adjacency of `topology`.
    pub fn new(topology: WeightedGraph, coupling: Coupling, omega: Vec<f64>) -> Result<Self> {
        let nbhd = Neighborhoods::from_graph(&topology);
        Self::with_neighborhoods(topology, nbhd, coupling, omega)
    }

    pub fn with_neighborhoods(
        topology: WeightedGraph,
        nbhd: Neighborhoods,
        coupling: Coupling,
        omega: Vec<f64>,
    ) -> Result<Self> {
        let n = topology.vertex_count();
        if nbhd.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: nbhd.len() });
        }
        if omega.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: omega.len() });
        }
        if let Some(v) = (0..n).find(|&v| nbhd.of(v).is_empty()) {
            return Err(Error::InvalidParameter(format!("vertex {v} has an empty neighborhood")));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("intrinsic frequencies must be finite".into()));
        }
        coupling.check_periodic()?;
        Ok(PhaseSystem { topology, nbhd, coupling, omega })
    }

    /// Identical oscillators with frequency `omega` on a lattice.
    pub fn lattice(
        shape: LatticeShape,
        rule: EdgeRule,
        boundary: Boundary,
        coupling: Coupling,
        omega: f64,
    ) -> Result<Self> {
        let g = build_lattice_graph(shape, rule, |_| 1.0, boundary)?;
        let n = g.vertex_count();
        Self::new(g, coupling, vec![omega; n])
    }

    pub fn vertex_count(&self) -> usize {
        self.omega.len()
    }

    pub fn topology(&self) -> &WeightedGraph {
        &self.topology
    }

    pub fn neighborhoods(&self) -> &Neighborhoods {
        &self.nbhd
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn boundary(&self) -> Boundary {
        self.topology.boundary()
    }

    /// Common frequency when all `ω_v` agree.
    pub fn uniform_omega(&self) -> Option<f64> {
        let w0 = self.omega[0];
        self.omega.iter().all(|&w| w == w0).then_some(w0)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.vertex_count() {
            Err(Error::LengthMismatch { expected: self.vertex_count(), got: x.len() })
        } else {
            Ok(())
        }
    }

    fn eval_vertex(&self, lags: &[f64], big_omega: f64, psi: Option<&[f64]>, v: usize) -> f64 {
        let mut s = self.omega[v] - big_omega;
        for &u in self.nbhd.of(v) {
            let mut d = principal(lags[u] - lags[v]);
            if let Some(p) = psi {
                d += p[u] - p[v];
            }
            s += self.coupling.h(d);
        }
        s
    }

    fn eval_all(&self, lags: &[f64], big_omega: f64, psi: Option<&[f64]>, out: &mut [f64]) {
        if out.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(1024).enumerate().for_each(|(c, chunk)| {
                for (k, o) in chunk.iter_mut().enumerate() {
                    *o = self.eval_vertex(lags, big_omega, psi, c * 1024 + k);
                }
            });
        } else {
            for (v, o) in out.iter_mut().enumerate() {
                *o = self.eval_vertex(lags, big_omega, psi, v);
            }
        }
    }

    /// `(ω_v − Ω) + Σ_{v'∈N(v)} H(θ̄_v' − θ̄_v)` at every vertex.
    pub fn phase_lag_residual(&self, lags: &[f64], big_omega: f64) -> Result<StateVector> {
        self.check_len(lags)?;
        let mut out = vec![0.0; self.vertex_count()];
        self.eval_all(lags, big_omega, None, &mut out);
        Ok(out.into())
    }

    /// Right-hand side of the perturbation system.
    pub fn perturbation_rhs(&self, sol: &PhaseLockedSolution, psi: &[f64]) -> Result<StateVector> {
        self.check_len(psi)?;
        self.check_len(&sol.lags)?;
        let mut out = vec![0.0; self.vertex_count()];
        self.eval_all(&sol.lags, sol.big_omega, Some(psi), &mut out);
        Ok(out.into())
    }

    /// Unnormalized linearization `[L x]_v = Σ H′(θ̄_v' − θ̄_v)(x_v' − x_v)`.
    pub fn linearization_apply(&self, lags: &[f64], x: &[f64]) -> Result<StateVector> {
        self.check_len(lags)?;
        self.check_len(x)?;
        Ok((0..self.vertex_count())
            .map(|v| {
                self.nbhd.of(v).iter().map(|&u| self.coupling.dh(principal(lags[u] - lags[v])) * (x[u] - x[v])).sum()
            })
            .collect())
    }

    /// Remainder `𝒢(ψ) = rhs(ψ)/c − L̃ψ` with `c` the bundle normalization.
    pub fn nonlinear_remainder(
        &self,
        sol: &PhaseLockedSolution,
        bundle: &InducedGraphBundle,
        psi: &[f64],
    ) -> Result<StateVector> {
        let rhs = self.perturbation_rhs(sol, psi)?;
        let lin = bundle.generator_apply(psi)?;
        let c = bundle.normalization();
        Ok(rhs.iter().zip(lin.iter()).map(|(r, l)| r / c - l).collect())
    }

    /// Solves the lag equation by damped Newton under `constraints`.
    pub fn solve_phase_locked(
        &self,
        initial: &[f64],
        big_omega: f64,
        constraints: &LagConstraints,
        opts: NewtonOptions,
    ) -> Result<PhaseLockedSolution> {
        self.check_len(initial)?;
        let omega_free = self.uniform_omega().is_none() || !self.coupling.is_odd();
        let red = constraints.reduce(self.vertex_count(), omega_free)?;
        let k = red.unknowns;
        let dim = k + omega_free as usize;

        let mut z = vec![0.0; dim];
        let mut seen = vec![false; k];
        for (v, s) in red.slots.iter().enumerate() {
            if let Slot::Tied { unknown, sign, offset } = *s {
                if !seen[unknown] {
                    seen[unknown] = true;
                    z[unknown] = (initial[v] - offset) / sign;
                }
            }
        }
        if omega_free {
            z[k] = big_omega;
        }

        let mut lags = vec![0.0; self.vertex_count()];
        let eval = |z: &[f64], lags: &mut Vec<f64>| -> Vec<f64> {
            red.assemble(z, lags);
            let om = if omega_free { z[k] } else { big_omega };
            red.equations.iter().map(|&v| self.eval_vertex(lags, om, None, v)).collect()
        };

        let mut f = eval(&z, &mut lags);
        let mut iterations = 0;
        while lp_norm(&f, Norm::Linf) >= opts.tol {
            if iterations == opts.max_iter {
                return Err(Error::NoConvergence { iterations, residual: lp_norm(&f, Norm::Linf) });
            }
            iterations += 1;
            let jac = self.jacobian(&red, &lags, omega_free);
            let rhs: Vec<f64> = f.iter().map(|x| -x).collect();
            let delta = solve_linear(&jac, &rhs).ok_or(Error::SingularJacobian { iteration: iterations })?;
            let f0 = lp_norm(&f, Norm::L2);
            let mut alpha = 1.0;
            let mut trial_lags = lags.clone();
            loop {
                let zt: Vec<f64> = z.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
                let ft = eval(&zt, &mut trial_lags);
                let ft_norm = lp_norm(&ft, Norm::L2);
                if ft_norm <= (1.0 - 1e-4 * alpha) * f0 || (alpha < 1e-3 && ft_norm < f0) {
                    z = zt;
                    f = ft;
                    std::mem::swap(&mut lags, &mut trial_lags);
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-9 {
                    return Err(Error::NoConvergence { iterations, residual: lp_norm(&f, Norm::Linf) });
                }
            }
        }
        red.assemble(&z, &mut lags);
        let om = if omega_free { z[k] } else { big_omega };
        let lags: StateVector = lags.iter().map(|&x| wrap_lag(x)).collect();
        let residual = self.phase_lag_residual(&lags, om)?.norm(Norm::Linf);
        if residual >= opts.accept {
            return Err(Error::NoConvergence { iterations, residual });
        }
        Ok(PhaseLockedSolution { lags, big_omega: om, residual, iterations })
    }

    fn jacobian(&self, red: &LagReduction, lags: &[f64], omega_free: bool) -> CsrMatrix {
        let k = red.unknowns;
        let mut trips = Vec::new();
        let mut push = |row: usize, vertex: usize, value: f64| {
            if let Slot::Tied { unknown, sign, .. } = red.slots[vertex] {
                trips.push((row, unknown, sign * value));
            }
        };
        for (row, &v) in red.equations.iter().enumerate() {
            for &u in self.nbhd.of(v) {
                let d = self.coupling.dh(principal(lags[u] - lags[v]));
                push(row, u, d);
                push(row, v, -d);
            }
        }
        if omega_free {
            for row in 0..red.equations.len() {
                trips.push((row, k, -1.0));
            }
        }
        let dim = k + omega_free as usize;
        CsrMatrix::from_triplets(red.equations.len(), dim, trips)
    }

    /// Builds an initial perturbation of ℓ¹ size `eps` (before mean removal).
    pub fn initial_perturbation(&self, init: &PerturbationInit, eps: f64, remove_mean: bool) -> Result<StateVector> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("perturbation size must be positive, got {eps}")));
        }
        let n = self.vertex_count();
        let g = &self.topology;
        let center = init.center.unwrap_or_else(|| g.central_vertex());
        if center >= n {
            return Err(Error::VertexOutOfRange(center));
        }
        let mut x = vec![0.0; n];
        match init.shape {
            PerturbationShape::Indicator => x[center] = 1.0,
            PerturbationShape::Gaussian { sigma } => {
                if !(sigma > 0.0) {
                    return Err(Error::InvalidParameter("gaussian width must be positive".into()));
                }
                let d = g.distances_from(center);
                for v in 0..n {
                    if d[v] != crate::graph::UNREACHABLE {
                        x[v] = (-(d[v] as f64).powi(2) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            PerturbationShape::RandomSupport { radius } => {
                let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
                let d = g.distances_from(center);
                for v in 0..n {
                    if d[v] <= radius {
                        x[v] = rng.random::<f64>() - 0.5;
                    }
                }
            }
        }
        let l1 = lp_norm(&x, Norm::L1);
        if l1 == 0.0 {
            return Err(Error::InvalidParameter("perturbation profile vanishes".into()));
        }
        let mut x: StateVector = x.iter().map(|v| eps * v / l1).collect();
        if remove_mean {
            let m = x.mean();
            x.iter_mut().for_each(|v| *v -= m);
        }
        Ok(x)
    }

    /// Adaptive Dormand–Prince 5(4) integration of the perturbation system.
    /// The trajectory holds `t = 0` followed by every time in `t_out`.
    pub fn integrate_perturbation(
        &self,
        sol: &PhaseLockedSolution,
        psi0: &[f64],
        t_out: &[f64],
        controls: &IntegratorControls,
    ) -> Result<PerturbationTrajectory> {
        self.check_len(psi0)?;
        if psi0.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("initial perturbation is not finite".into()));
        }
        if t_out.is_empty() || t_out[0] <= 0.0 || t_out.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("output times must be positive and strictly increasing".into()));
        }
        let n = self.vertex_count();
        let ring = if self.boundary() == Boundary::Free { self.topology.outer_ring() } else { Vec::new() };
        let psi0_l1 = lp_norm(psi0, Norm::L1);
        let sum0: f64 = psi0.iter().sum();

        let mut traj = PerturbationTrajectory {
            rows: Vec::new(),
            states: Vec::new(),
            boundary_flagged_at: None,
            psi0_l1,
            max_sum_drift: 0.0,
            steps: 0,
            rejected: 0,
        };
        let record = |t: f64, y: &[f64], traj: &mut PerturbationTrajectory| -> Result<()> {
            let bm: f64 = ring.iter().map(|&v| (y[v] - psi0[v]).abs()).sum();
            if traj.boundary_flagged_at.is_none() && bm > controls.boundary_flag_fraction * psi0_l1 {
                traj.boundary_flagged_at = Some(t);
            }
            traj.max_sum_drift = traj.max_sum_drift.max((y.iter().sum::<f64>() - sum0).abs());
            traj.rows.push(TrajectoryRow {
                t,
                l1: lp_norm(y, Norm::L1),
                l2: lp_norm(y, Norm::L2),
                linf: lp_norm(y, Norm::Linf),
                boundary_mass: bm,
                sqrt_q: q_form(&self.nbhd, y)?.sqrt(),
            });
            if controls.keep_states {
                traj.states.push(y.to_vec().into());
            }
            Ok(())
        };
        record(0.0, psi0, &mut traj)?;

        let f = |y: &[f64], out: &mut [f64]| self.eval_all(&sol.lags, sol.big_omega, Some(y), out);
        let mut y = psi0.to_vec();
        let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        let mut ynew = vec![0.0; n];
        f(&y, &mut k[0]);

        let mut t = 0.0;
        let mut h = controls.h_init.unwrap_or_else(|| initial_step(&y, &k[0], controls));
        let mut next = 0;
        while next < t_out.len() {
            let target = t_out[next];
            let mut last = false;
            if t + h >= target {
                h = target - t;
                last = true;
            }
            if h < controls.h_min {
                return Err(Error::StepSizeUnderflow { t });
            }
            if traj.steps + traj.rejected >= controls.max_steps {
                return Err(Error::StepSizeUnderflow { t });
            }
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, a) in DP_A[s - 1].iter().enumerate().take(s) {
                        if *a != 0.0 {
                            acc += h * a * k[j][i];
                        }
                    }
                    tmp[i] = acc;
                }
                f(&tmp, &mut k[s]);
            }
            // the last stage is evaluated at the 5th-order solution (FSAL)
            ynew.copy_from_slice(&tmp);
            let mut err = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for j in 0..7 {
                    e += DP_E[j] * k[j][i];
                }
                let sc = controls.atol + controls.rtol * y[i].abs().max(ynew[i].abs());
                err += (h * e / sc).powi(2);
            }
            let err = (err / n as f64).sqrt();
            if err <= 1.0 {
                t = if last { target } else { t + h };
                std::mem::swap(&mut y, &mut ynew);
                k.swap(0, 6);
                traj.steps += 1;
                if last {
                    record(t, &y, &mut traj)?;
                    next += 1;
                }
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                h *= fac;
            } else {
                traj.rejected += 1;
                h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
            if !h.is_finite() {
                return Err(Error::StepSizeUnderflow { t });
            }
        }
        Ok(traj)
    }
}

fn initial_step(y: &[f64], f0: &[f64], c: &IntegratorControls) -> f64 {
    let n = y.len().max(1) as f64;
    let sc = |i: usize| c.atol + c.rtol * y[i].abs();
    let d0 = (y.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n).sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        (0.01 * d0 / d1).min(1.0)
    }
}

const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

const DP_E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

fn solve_linear(a: &CsrMatrix, b: &[f64]) -> Option<Vec<f64>> {
    if a.n_rows <= DENSE_LIMIT {
        return dense_solve(a, b);
    }
    let opts = KrylovOptions::default();
    if a.is_symmetric(1e-12) {
        if let Some(x) = conjugate_gradient(a, b, opts) {
            return Some(x);
        }
    }
    gmres(a, b, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLockedSolution {
    pub lags: StateVector,
    #[serde(rename = "Omega")]
    pub big_omega: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl PhaseLockedSolution {
    /// Wraps `lags` and records the residual under `sys`.
    pub fn from_lags(sys: &PhaseSystem, lags: Vec<f64>, big_omega: f64) -> Result<Self> {
        let lags: StateVector = lags.into_iter().map(wrap_lag).collect();
        let residual = sys.phase_lag_residual(&lags, big_omega)?.norm(Norm::Linf);
        Ok(PhaseLockedSolution { lags, big_omega, residual, iterations: 0 })
    }
}

/// On-disk form of a system together with one of its solutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionJson {
    pub omega: Vec<f64>,
    #[serde(rename = "H")]
    pub coupling: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<FourierTable>,
    pub lags: Vec<f64>,
    #[serde(rename = "Omega")]
    pub big_omega: f64,
    pub residual: f64,
}

impl SolutionJson {
    pub fn new(sys: &PhaseSystem, sol: &PhaseLockedSolution) -> Result<Self> {
        let (coupling, table) = sys.coupling.tag()?;
        Ok(SolutionJson {
            omega: sys.omega.clone(),
            coupling,
            table,
            lags: sol.lags.to_vec(),
            big_omega: sol.big_omega,
            residual: sol.residual,
        })
    }

    pub fn coupling(&self) -> Result<Coupling> {
        Coupling::from_tag(&self.coupling, self.table.as_ref())
    }

    /// Rebuilds system and solution on a given topology.
    pub fn restore(&self, topology: WeightedGraph) -> Result<(PhaseSystem, PhaseLockedSolution)> {
        let sys = PhaseSystem::new(topology, self.coupling()?, self.omega.clone())?;
        let sol = PhaseLockedSolution::from_lags(&sys, self.lags.clone(), self.big_omega)?;
        Ok((sys, sol))
    }
}

/// How a lag vertex depends on the Newton unknowns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    Fixed(f64),
    /// `θ_v = sign · u_unknown + offset`
    Tied {
        unknown: usize,
        sign: f64,
        offset: f64,
    },
}

/// Explicit parametrization of the lags by a reduced unknown vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LagReduction {
    pub slots: Vec<Slot>,
    /// Vertices whose lag equations are enforced.
    pub equations: Vec<usize>,
    pub unknowns: usize,
}

impl LagReduction {
    fn assemble(&self, z: &[f64], lags: &mut [f64]) {
        for (v, s) in self.slots.iter().enumerate() {
            lags[v] = match *s {
                Slot::Fixed(c) => c,
                Slot::Tied { unknown, sign, offset } => sign * z[unknown] + offset,
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LagConstraints {
    /// Fix the listed `(vertex, lag)` pairs; every other lag is free.
    Pin(Vec<(usize, f64)>),
    Reduced(LagReduction),
}

impl LagConstraints {
    fn reduce(&self, n: usize, omega_free: bool) -> Result<LagReduction> {
        match self {
            LagConstraints::Pin(pins) => {
                if pins.is_empty() {
                    return Err(Error::InvalidParameter(
                        "at least one lag must be pinned (uniform shifts are solutions)".into(),
                    ));
                }
                let mut slots = vec![Slot::Tied { unknown: 0, sign: 1.0, offset: 0.0 }; n];
                let mut pinned = vec![false; n];
                for &(v, c) in pins {
                    if v >= n {
                        return Err(Error::VertexOutOfRange(v));
                    }
                    pinned[v] = true;
                    slots[v] = Slot::Fixed(c);
                }
                let mut k = 0;
                let mut equations = Vec::new();
                for v in 0..n {
                    if !pinned[v] {
                        slots[v] = Slot::Tied { unknown: k, sign: 1.0, offset: 0.0 };
                        equations.push(v);
                        k += 1;
                    }
                }
                if omega_free {
                    equations.push(pins[0].0);
                }
                Ok(LagReduction { slots, equations, unknowns: k })
            }
            LagConstraints::Reduced(r) => {
                if r.slots.len() != n {
                    return Err(Error::LengthMismatch { expected: n, got: r.slots.len() });
                }
                let need = r.unknowns + omega_free as usize;
                if r.equations.len() != need {
                    return Err(Error::InvalidParameter(format!(
                        "reduction has {} equations for {need} unknowns",
                        r.equations.len()
                    )));
                }
                for s in &r.slots {
                    if let Slot::Tied { unknown, sign, .. } = *s {
                        if unknown >= r.unknowns || sign.abs() != 1.0 {
                            return Err(Error::InvalidParameter("malformed reduction slot".into()));
                        }
                    }
                }
                if let Some(&v) = r.equations.iter().find(|&&v| v >= n) {
                    return Err(Error::VertexOutOfRange(v));
                }
                Ok(r.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop once the enforced equations are below this in ℓ∞.
    pub tol: f64,
    /// Required ℓ∞ residual of the full lag equation.
    pub accept: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iter: 50, tol: 1e-12, accept: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorControls {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_min: f64,
    pub max_steps: usize,
    /// Boundary mass above this fraction of ‖ψ0‖₁ is flagged.
    pub boundary_flag_fraction: f64,
    pub keep_states: bool,
}

impl Default for IntegratorControls {
    fn default() -> Self {
        IntegratorControls {
            rtol: 1e-8,
            atol: 1e-10,
            h_init: None,
            h_min: 1e-12,
            max_steps: 5_000_000,
            boundary_flag_fraction: 0.01,
            keep_states: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub boundary_mass: f64,
    pub sqrt_q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTrajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Full states at every row when requested.
    pub states: Vec<StateVector>,
    /// First output time at which boundary mass exceeded the flag fraction.
    pub boundary_flagged_at: Option<f64>,
    pub psi0_l1: f64,
    /// Largest observed `|Σψ(t) − Σψ0|`.
    pub max_sum_drift: f64,
    pub steps: usize,
    pub rejected: usize,
}

impl PerturbationTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationShape {
    Indicator,
    Gaussian { sigma: f64 },
    RandomSupport { radius: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInit {
    pub shape: PerturbationShape,
    /// Defaults to the vertex nearest the lattice origin.
    pub center: Option<usize>,
    pub seed: u64,
}

impl PerturbationInit {
    pub fn indicator() -> Self {
        PerturbationInit { shape: PerturbationShape::Indicator, center: None, seed: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Coord;

    fn trivial(n: usize, boundary: Boundary) -> (PhaseSystem, PhaseLockedSolution) {
        let sys =
            PhaseSystem::lattice(LatticeShape::square(n), EdgeRule::NearestNeighbor, boundary, Coupling::Sine, 1.3)
                .unwrap();
        let sol = PhaseLockedSolution::from_lags(&sys, vec![0.0; n * n], 1.3).unwrap();
        (sys, sol)
    }

    #[test]
    fn principal_range() {
        assert_eq!(principal(PI), PI);
        assert_eq!(principal(-PI), PI);
        assert!((principal(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_lag(-1e-300), 0.0);
        assert!(wrap_lag(-0.5) > 0.0);
    }

    #[test]
    fn residual_examples() {
        let (sys, _) = trivial(5, Boundary::Free);
        let r = sys.phase_lag_residual(&[0.0; 25], 1.3).unwrap();
        assert!(r.iter().all(|x| *x == 0.0));
        let r = sys.phase_lag_residual(&[0.0; 25], 1.4).unwrap();
        assert!(r.iter().all(|x| (x + 0.1).abs() < 1e-15));
    }

    #[test]
    fn rhs_indicator_hand_values() {
        let (sys, sol) = trivial(7, Boundary::Free);
        let g = sys.topology();
        let c = g.vertex_at(Coord::Plane(0, 0)).unwrap().0;
        let eps = 0.01;
        let psi = StateVector::indicator(49, c).iter().map(|x| x * eps).collect::<Vec<_>>();
        let r = sys.perturbation_rhs(&sol, &psi).unwrap();
        assert!((r[c] + 4.0 * eps.sin()).abs() < 1e-16);
        for (i, j) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            assert!((r[g.vertex_at(Coord::Plane(i, j)).unwrap().0] - eps.sin()).abs() < 1e-16);
        }
    }

    #[test]
    fn newton_recovers_trivial_branch() {
        let (sys, _) = trivial(6, Boundary::Free);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init: Vec<f64> = (0..36).map(|_| 0.01 * (rng.random::<f64>() - 0.5)).collect();
        let pin = sys.topology().vertex_at(Coord::Plane(0, 0)).unwrap().0;
        let sol = sys
            .solve_phase_locked(&init, 1.3, &LagConstraints::Pin(vec![(pin, 0.0)]), NewtonOptions::default())
            .unwrap();
        assert!(sol.residual < 1e-10);
        assert!(sol.lags.iter().all(|&x| principal(x).abs() < 1e-10));
    }

    #[test]
    fn newton_requires_pin() {
        let (sys, _) = trivial(4, Boundary::Free);
        let err = sys.solve_phase_locked(&[0.0; 16], 1.3, &LagConstraints::Pin(vec![]), NewtonOptions::default());
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn newton_with_varying_frequencies_solves_for_omega() {
        let g =
            build_lattice_graph(LatticeShape::Chain(5), EdgeRule::NearestNeighbor, |_| 1.0, Boundary::Free).unwrap();
        let omega = vec![0.1, -0.05, 0.0, 0.02, 0.03];
        let sys = PhaseSystem::new(g, Coupling::Sine, omega.clone()).unwrap();
        let sol = sys
            .solve_phase_locked(&[0.0; 5], 0.0, &LagConstraints::Pin(vec![(2, 0.0)]), NewtonOptions::default())
            .unwrap();
        // odd H: Ω is the mean frequency
        assert!((sol.big_omega - omega.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn fourier_and_custom_match_sine() {
        let f = Coupling::fourier(vec![0.0], vec![0.0, 1.0]).unwrap();
        let c = Coupling::custom(f64::sin, f64::cos, |x| -x.sin());
        for x in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            for k in [&f, &c] {
                assert!((k.h(x) - x.sin()).abs() < 1e-15);
                assert!((k.dh(x) - x.cos()).abs() < 1e-15);
                assert!((k.ddh(x) + x.sin()).abs() < 1e-15);
            }
        }
        assert!(f.is_odd());
        assert!(!Coupling::fourier(vec![0.3], vec![0.0, 1.0]).unwrap().is_odd());
        let nonperiodic = Coupling::custom(|x| x, |_| 1.0, |_| 0.0);
        assert!(nonperiodic.check_periodic().is_err());
    }

    #[test]
    fn sup_ddh_for_sine() {
        assert_eq!(Coupling::Sine.sup_abs_ddh(-0.1, 0.1), 0.1f64.sin());
        assert_eq!(Coupling::Sine.sup_abs_ddh(1.0, 2.0), 1.0);
        assert_eq!(Coupling::Sine.sup_abs_ddh(-4.0, 4.0), 1.0);
        let f = Coupling::fourier(vec![0.0], vec![0.0, 1.0]).unwrap();
        assert!(f.sup_abs_ddh(-0.1, 0.1) >= 0.1f64.sin());
    }

    #[test]
    fn zero_perturbation_stays_zero() {
        let (sys, sol) = trivial(9, Boundary::Free);
        let traj =
            sys.integrate_perturbation(&sol, &[0.0; 81], &[1.0, 5.0, 10.0], &IntegratorControls::default()).unwrap();
        assert!(traj.rows.iter().all(|r| r.linf == 0.0));
        assert_eq!(traj.rows[0].t, 0.0);
    }

    #[test]
    fn uniform_perturbation_is_gauge() {
        let (sys, sol) = trivial(9, Boundary::Free);
        let traj = sys.integrate_perturbation(&sol, &[0.25; 81], &[2.0, 20.0], &IntegratorControls::default()).unwrap();
        assert!(traj.rows.iter().all(|r| (r.linf - 0.25).abs() < 1e-14));
    }

    #[test]
    fn integrator_matches_linear_decay_on_two_vertices() {
        // ψ1 − ψ0 = x obeys x' = −2 sin x
        let g =
            build_lattice_graph(LatticeShape::Chain(3), EdgeRule::NearestNeighbor, |_| 1.0, Boundary::Torus).unwrap();
        let sys = PhaseSystem::new(g, Coupling::Sine, vec![0.0; 3]).unwrap();
        let sol = PhaseLockedSolution::from_lags(&sys, vec![0.0; 3], 0.0).unwrap();
        let psi0 = [0.0, 0.0, 0.3];
        let ctl = IntegratorControls { keep_states: true, rtol: 1e-10, atol: 1e-12, ..Default::default() };
        let traj = sys.integrate_perturbation(&sol, &psi0, &[0.5, 1.0, 2.0], &ctl).unwrap();
        // on the 3-cycle the mean is conserved and deviations decay like exp(−3t) to first order
        for (row, st) in traj.rows.iter().zip(&traj.states).skip(1) {
            let mean = st.mean();
            assert!((mean - 0.1).abs() < 1e-10);
            assert!(row.linf <= 0.3);
        }
        assert!(traj.max_sum_drift < 1e-12);
    }

    #[test]
    fn serialization_roundtrip() {
        let (sys, sol) = trivial(4, Boundary::Torus);
        let js = SolutionJson::new(&sys, &sol).unwrap();
        let text = serde_json::to_string(&js).unwrap();
        assert!(text.contains("\"H\":\"sin\""));
        assert!(text.contains("\"Omega\""));
        let back: SolutionJson = serde_json::from_str(&text).unwrap();
        let (_, sol2) = back.restore(sys.topology().clone()).unwrap();
        assert_eq!(sol2.lags, sol.lags);
    }
}
