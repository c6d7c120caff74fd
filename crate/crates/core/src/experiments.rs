//! End-to-end stability runs and numerical checks of the inequality toolkit.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_power_law, ols, DecayFit, MIN_FIT_POINTS};
use crate::graph::{lp_norm, q_form, Boundary, Coord, Neighborhoods, Norm, WeightedGraph};
use crate::heat::HeatSemigroup;
use crate::linalg::{lanczos_ritz, CsrMatrix};
use crate::linearize::{check_hypotheses, linearize, HypothesisReport, InducedGraphBundle};
use crate::phase::{principal, IntegratorControls, PerturbationInit, PhaseLockedSolution, PhaseSystem};
use crate::property::{
    check_delta, check_rough_isometry, check_vg, default_centers, guard_radius, identity_map, poincare_survey,
    DeltaReport, PairSampling, PoincareReport, RoughConstants, RoughIsometryCertificate, VgReport,
};
use crate::solutions::{
    chain_lags, doubly_periodic_lags, rotating_wave_lags, sine_lattice, trivial_lags, RotatingWaveSpec,
};

/// Dimension the stability theorem needs from the volume-growth fit.
pub const REQUIRED_DIMENSION: f64 = 2.0;
pub const LINF_SLOPE_TOL: f64 = 0.15;
pub const L2_SLOPE_TOL: f64 = 0.10;
pub const L1_GROWTH_LIMIT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Trivial,
    RotatingWave,
    DoublyPeriodic { n1: usize, n2: usize },
    Chain { n: usize },
}

impl Family {
    pub fn label(&self) -> String {
        match self {
            Family::Trivial => "trivial".into(),
            Family::RotatingWave => "rotating_wave".into(),
            Family::DoublyPeriodic { n1, n2 } => format!("doubly_periodic_{n1}x{n2}"),
            Family::Chain { n } => format!("chain_range_{n}"),
        }
    }
}

/// Builds the phase system and phase-locked solution of a family.
pub fn build_family(
    family: Family,
    extent: usize,
    boundary: Boundary,
    omega: f64,
) -> Result<(PhaseSystem, PhaseLockedSolution)> {
    match family {
        Family::Trivial => {
            let sys = sine_lattice(extent, boundary, omega)?;
            let sol = trivial_lags(&sys)?;
            Ok((sys, sol))
        }
        Family::RotatingWave => {
            if boundary != Boundary::Free {
                return Err(Error::InvalidParameter("the rotating wave lives on a free lattice".into()));
            }
            let rw = rotating_wave_lags(&RotatingWaveSpec { omega, ..RotatingWaveSpec::new(extent) })?;
            Ok((rw.system, rw.solution))
        }
        Family::DoublyPeriodic { n1, n2 } => {
            let sys = sine_lattice(extent, boundary, omega)?;
            let sol = doubly_periodic_lags(&sys, n1, n2)?;
            Ok((sys, sol))
        }
        Family::Chain { n } => {
            if boundary != Boundary::Free {
                return Err(Error::InvalidParameter("chains are built with free ends".into()));
            }
            chain_lags(n, extent, omega)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateOptions {
    pub vg_centers: usize,
    pub center_spread: i64,
    pub vg_r_min: u32,
    pub vg_r_max: u32,
    pub vg_radii: usize,
    pub pi_radii: [u32; 3],
    pub sampling: PairSampling,
}

impl Default for GateOptions {
    fn default() -> Self {
        GateOptions {
            vg_centers: 5,
            center_spread: 5,
            vg_r_min: 5,
            vg_r_max: 40,
            vg_radii: 8,
            pi_radii: [2, 4, 8],
            sampling: PairSampling::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub hypotheses: HypothesisReport,
    pub vg: Option<VgReport>,
    pub delta: Option<DeltaReport>,
    pub pi: Option<PoincareReport>,
    pub rough: Option<RoughIsometryCertificate>,
    pub normalization: Option<f64>,
    pub loops_added: Option<bool>,
    /// Names of failed hypotheses, in check order.
    pub failed: Vec<String>,
    pub pass: bool,
}

impl GateSummary {
    fn refusal(&self) -> Error {
        let hypothesis = self.failed.first().cloned().unwrap_or_default();
        let detail = match hypothesis.as_str() {
            "volume_growth" => match &self.vg {
                Some(vg) => format!(
                    "fitted volume-growth dimension d = {:.3} but the decay theorem needs d >= {REQUIRED_DIMENSION}",
                    vg.d
                ),
                None => "volume growth could not be probed".into(),
            },
            "delta" => "local elliptic constant is not positive".into(),
            "poincare" => "Poincaré constant is not finite on the probes".into(),
            "rough_isometry" => "rough isometry to the unit lattice graph was not certified".into(),
            "weights" => "induced weights are negative or asymmetric".into(),
            "connected" => "induced graph is disconnected".into(),
            other => format!("{other} failed"),
        };
        Error::GateRefused { hypothesis, detail }
    }
}

/// Geometric VG probe radii capped by the clearance around `centers`.
pub fn vg_radii(g: &WeightedGraph, centers: &[usize], opts: &GateOptions) -> Result<Vec<u32>> {
    let clearance = centers.iter().map(|&c| guard_radius(g, c)).min().unwrap_or(0);
    let hi = opts.vg_r_max.min(clearance);
    if hi < opts.vg_r_min + opts.vg_radii as u32 {
        return Err(Error::BoundaryGuard(format!(
            "lattice leaves clearance {clearance} around the probes; volume growth needs radii up to at least {}",
            opts.vg_r_min + opts.vg_radii as u32
        )));
    }
    Ok(geomspace_u32(opts.vg_r_min, hi, opts.vg_radii))
}

/// `n` distinct integer radii spread geometrically over `[lo, hi]`.
fn geomspace_u32(lo: u32, hi: u32, n: usize) -> Vec<u32> {
    let mut r: Vec<u32> = crate::fit::geomspace(lo as f64, hi as f64, n).iter().map(|x| x.round() as u32).collect();
    r.dedup();
    r
}

/// Reference graph for rough-isometry certificates: the equal-lag
/// linearization on the same lattice.
fn unit_reference(sys: &PhaseSystem) -> Result<InducedGraphBundle> {
    let g = sys.topology();
    let (n, _) = g.extents().ok_or_else(|| Error::InvalidParameter("unlabelled topology".into()))?;
    let base = sine_lattice(n, g.boundary(), 0.0)?;
    let sol = trivial_lags(&base)?;
    linearize(&base, &sol)
}

fn rough_candidate(family: Family, reference: &WeightedGraph, target: &WeightedGraph) -> Option<RoughConstants> {
    let weights = target.edges().iter().filter(|e| e.u != e.v).map(|e| e.w);
    let (w_min, w_max) = weights.fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(w), hi.max(w)));
    match family {
        Family::RotatingWave => {
            Some(RoughConstants { a: 2.0, b: 8.0, c: (5.0 * w_max / 4.0).max(4.0 / w_min).max(2.0), m: 0.0 })
        }
        Family::DoublyPeriodic { .. } => {
            let ratio = (0..reference.vertex_count())
                .map(|v| {
                    let (a, b) = (reference.measure(v), target.measure(v));
                    (a / b).max(b / a)
                })
                .fold(1.0, f64::max);
            Some(RoughConstants { a: 1.01, b: 0.01, c: ratio * (1.0 + 1e-9), m: 0.0 })
        }
        _ => None,
    }
}

/// Runs every hypothesis check the decay theorem needs.
pub fn evaluate_gate(
    family: Family,
    sys: &PhaseSystem,
    sol: &PhaseLockedSolution,
    opts: &GateOptions,
) -> Result<GateSummary> {
    let hypotheses = check_hypotheses(sys, sol)?;
    let mut gate = GateSummary {
        hypotheses,
        vg: None,
        delta: None,
        pi: None,
        rough: None,
        normalization: None,
        loops_added: None,
        failed: Vec::new(),
        pass: false,
    };
    if !gate.hypotheses.weights_ok {
        gate.failed.push("weights".into());
    }
    if !gate.hypotheses.connected {
        gate.failed.push("connected".into());
    }
    if !gate.failed.is_empty() {
        return Ok(gate);
    }
    let bundle = linearize(sys, sol)?;
    gate.normalization = Some(bundle.normalization());
    gate.loops_added = Some(bundle.loops_added());
    let g = bundle.augmented();

    let centers = default_centers(g, opts.vg_centers, opts.center_spread);
    let radii = vg_radii(g, &centers, opts)?;
    let vg = check_vg(g, &centers, &radii)?;
    if !vg.supports(REQUIRED_DIMENSION) {
        gate.failed.push("volume_growth".into());
    }
    gate.vg = Some(vg);

    let delta = check_delta(g)?;
    if !delta.pass {
        gate.failed.push("delta".into());
    }
    gate.delta = Some(delta);

    let pi = poincare_survey(g, &centers, &opts.pi_radii)?;
    if !pi.sup.is_finite() {
        gate.failed.push("poincare".into());
    }
    gate.pi = Some(pi);

    if matches!(family, Family::RotatingWave | Family::DoublyPeriodic { .. }) {
        let reference = unit_reference(sys)?;
        let candidate = rough_candidate(family, reference.augmented(), g).expect("candidate for family");
        let cert =
            check_rough_isometry(reference.augmented(), g, &identity_map(g.vertex_count()), opts.sampling, candidate)?;
        if !cert.pass() {
            gate.failed.push("rough_isometry".into());
        }
        gate.rough = Some(cert);
    }
    gate.pass = gate.failed.is_empty();
    Ok(gate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityExperimentConfig {
    pub family: Family,
    pub extent: usize,
    pub boundary: Boundary,
    pub omega: f64,
    pub perturbation: PerturbationInit,
    /// ℓ¹ size of the perturbation before mean removal.
    pub eps: f64,
    pub remove_mean: bool,
    /// Fit window in rescaled time `s = c·t`, `c` the linearization
    /// normalization. Defaults to `[5, R²/10]` for lattice radius `R`.
    pub window: Option<(f64, f64)>,
    /// Rescaled integration horizon; defaults to the window end.
    pub horizon: Option<f64>,
    pub n_out: usize,
    pub seed: u64,
    /// Integrate even when the gate refuses, recording the refusal.
    pub force: bool,
    pub gate: GateOptions,
    pub integrator: IntegratorControls,
}

impl Default for StabilityExperimentConfig {
    fn default() -> Self {
        StabilityExperimentConfig {
            family: Family::Trivial,
            extent: 101,
            boundary: Boundary::Free,
            omega: 0.0,
            perturbation: PerturbationInit::indicator(),
            eps: 1e-3,
            remove_mean: true,
            window: None,
            horizon: None,
            n_out: 48,
            seed: 0,
            force: false,
            gate: GateOptions::default(),
            integrator: IntegratorControls::default(),
        }
    }
}

impl StabilityExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        if self.n_out < MIN_FIT_POINTS {
            return Err(Error::InvalidParameter(format!("need at least {MIN_FIT_POINTS} output times")));
        }
        if let Some((a, b)) = self.window {
            if !(a > 0.0 && b > a) {
                return Err(Error::InvalidParameter(format!("fit window [{a}, {b}] is empty")));
            }
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return Err(Error::InvalidParameter("horizon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormFits {
    pub l1: Option<DecayFit>,
    pub l2: DecayFit,
    pub linf: DecayFit,
    pub sqrt_q: Option<DecayFit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub theorem_applicable: bool,
    pub linf_ok: bool,
    pub l2_ok: bool,
    pub l1_bounded: bool,
    pub decreasing: bool,
    pub pass: bool,
}

/// One output row with its rescaled time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: f64,
    pub s: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub boundary_mass: f64,
    pub sqrt_q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub family: String,
    pub vertex_count: usize,
    pub eps: f64,
    pub mean_removed: bool,
    pub normalization: f64,
    pub gate: GateSummary,
    pub dimension: f64,
    pub linf_target: f64,
    pub l2_target: f64,
    /// Window actually fitted, in rescaled time.
    pub window: (f64, f64),
    pub fits: NormFits,
    pub l1_sup_ratio: f64,
    pub psi0_l1: f64,
    pub max_sum_drift: f64,
    pub boundary_flagged_at: Option<f64>,
    pub steps: usize,
    pub rejected: usize,
    pub rows: Vec<ReportRow>,
    pub verdict: Verdict,
}

fn default_experiment_window(g: &WeightedGraph) -> (f64, f64) {
    let r = g.lattice_radius().unwrap_or(10.0);
    (5.0, 0.1 * r * r)
}

/// Integrates the perturbation system and fits the decay of its norms.
pub fn run_stability_experiment(cfg: &StabilityExperimentConfig) -> Result<StabilityReport> {
    cfg.validate()?;
    let (sys, sol) = build_family(cfg.family, cfg.extent, cfg.boundary, cfg.omega)?;
    let gate = evaluate_gate(cfg.family, &sys, &sol, &cfg.gate)?;
    if !gate.pass && !cfg.force {
        return Err(gate.refusal());
    }
    let c = gate.normalization.ok_or_else(|| gate.refusal())?;
    let window = cfg.window.unwrap_or_else(|| default_experiment_window(sys.topology()));
    let horizon = cfg.horizon.unwrap_or(window.1).max(window.1);
    let s_out = crate::fit::geomspace(1.0, horizon, cfg.n_out);
    let t_out: Vec<f64> = s_out.iter().map(|s| s / c).collect();

    let mut init = cfg.perturbation;
    if init.seed == 0 {
        init.seed = cfg.seed;
    }
    let psi0 = sys.initial_perturbation(&init, cfg.eps, cfg.remove_mean)?;
    let traj = sys.integrate_perturbation(&sol, &psi0, &t_out, &cfg.integrator)?;

    let rows: Vec<ReportRow> = traj
        .rows
        .iter()
        .map(|r| ReportRow {
            t: r.t,
            s: r.t * c,
            l1: r.l1,
            l2: r.l2,
            linf: r.linf,
            boundary_mass: r.boundary_mass,
            sqrt_q: r.sqrt_q,
        })
        .collect();
    let flagged_s = traj.boundary_flagged_at.map(|t| t * c);
    let hi = match flagged_s {
        Some(f) => window.1.min(f * (1.0 - 1e-12)),
        None => window.1,
    };
    let fitted: Vec<&ReportRow> = rows.iter().filter(|r| r.s >= window.0 && r.s <= hi).collect();
    if fitted.len() < MIN_FIT_POINTS {
        return Err(Error::Fit(format!(
            "only {} output times in [{}, {hi:.3}] before boundary contact; use a larger lattice",
            fitted.len(),
            window.0
        )));
    }
    let win = (window.0, hi);
    let s: Vec<f64> = rows.iter().map(|r| r.s).collect();
    let series = |f: fn(&ReportRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let fits = NormFits {
        l1: fit_power_law("l1", &s, &series(|r| r.l1), win).ok(),
        l2: fit_power_law("l2", &s, &series(|r| r.l2), win)?,
        linf: fit_power_law("linf", &s, &series(|r| r.linf), win)?,
        sqrt_q: fit_power_law("sqrt_q", &s, &series(|r| r.sqrt_q), win).ok(),
    };
    let dimension = gate.vg.as_ref().map_or(REQUIRED_DIMENSION, |v| v.d);
    let (linf_target, l2_target) = (-dimension / 2.0, -dimension / 4.0);
    let l1_sup_ratio = rows.iter().map(|r| r.l1).fold(0.0, f64::max) / traj.psi0_l1;
    let linf_ok = fits.linf.within(linf_target, LINF_SLOPE_TOL);
    let l2_ok = fits.l2.within(l2_target, L2_SLOPE_TOL);
    let l1_bounded = l1_sup_ratio <= L1_GROWTH_LIMIT;
    let decreasing = fitted.last().unwrap().linf < fitted[0].linf;
    let verdict = Verdict {
        theorem_applicable: gate.pass,
        linf_ok,
        l2_ok,
        l1_bounded,
        decreasing,
        pass: gate.pass && linf_ok && l2_ok && l1_bounded && decreasing,
    };
    Ok(StabilityReport {
        family: cfg.family.label(),
        vertex_count: sys.vertex_count(),
        eps: cfg.eps,
        mean_removed: cfg.remove_mean,
        normalization: c,
        gate,
        dimension,
        linf_target,
        l2_target,
        window: win,
        fits,
        l1_sup_ratio,
        psi0_l1: traj.psi0_l1,
        max_sum_drift: traj.max_sum_drift,
        boundary_flagged_at: traj.boundary_flagged_at,
        steps: traj.steps,
        rejected: traj.rejected,
        rows,
        verdict,
    })
}

/// Runs independent experiments in parallel, preserving input order.
pub fn run_sweep(configs: &[StabilityExperimentConfig]) -> Vec<Result<StabilityReport>> {
    configs.par_iter().map(run_stability_experiment).collect()
}

/// Largest `eps` in `eps_values` whose run passes, with all reports.
pub fn largest_passing_eps(
    base: &StabilityExperimentConfig,
    eps_values: &[f64],
) -> (Option<f64>, Vec<Result<StabilityReport>>) {
    let configs: Vec<_> = eps_values.iter().map(|&eps| StabilityExperimentConfig { eps, ..base.clone() }).collect();
    let reports = run_sweep(&configs);
    let best = eps_values
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.as_ref().is_ok_and(|r| r.verdict.pass))
        .map(|(&e, _)| e)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    (best, reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub samples: usize,
    pub delta: f64,
    /// `sup |H″|` over lag differences widened by `2δ`.
    pub k1: f64,
    /// `K = K₁ / (2c)` with `c` the normalization.
    pub constant: f64,
    pub slack: f64,
    pub violations: usize,
    /// Largest `‖𝒢(ψ)‖₁ / (K Q(ψ))` over samples with `Q > 0`.
    pub max_ratio: f64,
    pub counterexample: Option<Vec<f64>>,
}

/// Random `ψ` with `‖ψ‖₂ ≤ δ`: global noise, local bumps and sign patterns.
fn sample_small_state(rng: &mut ChaCha8Rng, g: &WeightedGraph, delta: f64, kind: usize) -> Vec<f64> {
    let n = g.vertex_count();
    let mut x = vec![0.0; n];
    match kind % 3 {
        0 => x.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal)),
        1 => {
            let c = rng.random_range(0..n);
            for (v, d) in g.distances_from(c).iter().enumerate() {
                if *d <= 3 {
                    x[v] = rng.random::<f64>() * 2.0 - 1.0;
                }
            }
        }
        _ => {
            for (v, xv) in x.iter_mut().enumerate() {
                let parity = g.coord(v).map_or(v as i64, |c| c.ij().0 + c.ij().1);
                *xv = if parity.rem_euclid(2) == 0 { 1.0 } else { -1.0 } * rng.random::<f64>();
            }
        }
    }
    let norm = lp_norm(&x, Norm::L2);
    let target = delta * rng.random::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / norm);
    }
    x
}

/// Checks `‖𝒢(ψ)‖₁ ≤ K Q(ψ)` on random `ψ` with `‖ψ‖₂ ≤ δ`.
pub fn verify_remainder_bound(
    sys: &PhaseSystem,
    sol: &PhaseLockedSolution,
    n_samples: usize,
    delta: f64,
    seed: u64,
) -> Result<RemainderReport> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("remainder bound needs 0 < δ ≤ 1, got {delta}")));
    }
    let bundle = linearize(sys, sol)?;
    let h = sys.coupling();
    let nb = sys.neighborhoods();
    let k1 = nb
        .pairs()
        .map(|(v, u)| {
            let d = principal(sol.lags[u] - sol.lags[v]);
            h.sup_abs_ddh(d - 2.0 * delta, d + 2.0 * delta)
        })
        .fold(0.0, f64::max);
    let constant = k1 / (2.0 * bundle.normalization());
    let n = sys.vertex_count();
    let g0 = lp_norm(&sys.nonlinear_remainder(sol, &bundle, &vec![0.0; n])?, Norm::L1);
    let slack = g0 + 1e-13 * n as f64 * delta;
    let g = sys.topology();

    let results: Vec<(f64, f64, Vec<f64>)> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let psi = sample_small_state(&mut rng, g, delta, k);
            let lhs = lp_norm(&sys.nonlinear_remainder(sol, &bundle, &psi)?, Norm::L1);
            let rhs = constant * q_form(nb, &psi)?;
            Ok((lhs, rhs, psi))
        })
        .collect::<Result<_>>()?;
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    let mut counterexample = None;
    for (lhs, rhs, psi) in results {
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
        if lhs > rhs + slack {
            violations += 1;
            counterexample.get_or_insert(psi);
        }
    }
    Ok(RemainderReport { samples: n_samples, delta, k1, constant, slack, violations, max_ratio, counterexample })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBoundReport {
    pub samples: usize,
    /// `D = max_v |N(v)|`.
    pub degree: usize,
    /// Largest `Q(x) / (D ‖x‖₂²)` over random samples.
    pub max_ratio: f64,
    pub violations_2d: usize,
    pub violations_4d: usize,
    /// `Q(x) / (D ‖x‖₂²)` for the alternating-sign state on a lattice.
    pub alternating_ratio: Option<f64>,
}

/// Compares `Q(x)` against `2D‖x‖₂²` and `4D‖x‖₂²` on standard normal `x`.
pub fn verify_q_bound(g: &WeightedGraph, nb: &Neighborhoods, n_samples: usize, seed: u64) -> Result<QBoundReport> {
    let n = nb.len();
    let d = nb.max_size();
    let ratios: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Ok(q_form(nb, &x)? / (d as f64 * lp_norm(&x, Norm::L2).powi(2)))
        })
        .collect::<Result<_>>()?;
    let alternating_ratio = if g.coords().iter().all(Option::is_some) && g.vertex_count() == n {
        let x: Vec<f64> = g
            .coords()
            .iter()
            .map(|c| {
                let (i, j) = c.unwrap().ij();
                if (i + j).rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        Some(q_form(nb, &x)? / (d as f64 * n as f64))
    } else {
        None
    };
    let tol = 1e-12;
    Ok(QBoundReport {
        samples: n_samples,
        degree: d,
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
        violations_2d: ratios.iter().filter(|&&r| r > 2.0 + tol).count(),
        violations_4d: ratios.iter().filter(|&&r| r > 4.0 + tol).count(),
        alternating_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QDecayReport {
    pub degenerate: bool,
    /// `(t, √Q(P_t ψ) / ‖P_t|ψ|‖₂)`.
    pub ratios: Vec<(f64, f64)>,
    pub fit: Option<DecayFit>,
    /// Fitted `η/2`.
    pub eta_half: f64,
    pub eta_half_stderr: f64,
    pub nonincreasing: bool,
    pub max_relative_increase: f64,
}

/// Gradient-to-mass ratio along the heat semigroup of `bundle`.
pub fn verify_q_semigroup_decay(bundle: &InducedGraphBundle, psi: &[f64], t_grid: &[f64]) -> Result<QDecayReport> {
    let nb = Neighborhoods::from_graph(bundle.base());
    if q_form(&nb, psi)? == 0.0 {
        return Ok(QDecayReport {
            degenerate: true,
            ratios: t_grid.iter().map(|&t| (t, 0.0)).collect(),
            fit: None,
            eta_half: 0.0,
            eta_half_stderr: 0.0,
            nonincreasing: true,
            max_relative_increase: 0.0,
        });
    }
    let heat = HeatSemigroup::from_bundle(bundle)?;
    let abs: Vec<f64> = psi.iter().map(|x| x.abs()).collect();
    let (a, b) = rayon::join(|| heat.apply_grid(psi, t_grid), || heat.apply_grid(&abs, t_grid));
    let (a, b) = (a?, b?);
    let ratios: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&t, (pa, pb))| Ok((t, q_form(&nb, pa)?.sqrt() / pb.norm(Norm::L2))))
        .collect::<Result<_>>()?;
    let max_relative_increase = ratios.windows(2).map(|w| (w[1].1 - w[0].1) / w[0].1).fold(0.0, f64::max);
    let (ts, rs): (Vec<f64>, Vec<f64>) = ratios.iter().copied().unzip();
    let fit = fit_power_law("q_ratio", &ts, &rs, (ts[0], *ts.last().unwrap()))?;
    Ok(QDecayReport {
        degenerate: false,
        eta_half: -fit.slope,
        eta_half_stderr: fit.slope_stderr,
        fit: Some(fit),
        ratios,
        nonincreasing: max_relative_increase <= 1e-9,
        max_relative_increase,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionDecayReport {
    pub gamma1: f64,
    pub gamma2: f64,
    /// `min{γ1 + γ2 − 1, γ1, γ2}`.
    pub exponent: f64,
    /// `(t, I(t), I(t)(1 + t)^{exponent})`.
    pub values: Vec<(f64, f64, f64)>,
    pub sup_ratio: f64,
    /// Log-log slope of the ratio over the last decade of the grid.
    pub tail_slope: f64,
    pub bounded: bool,
}

/// Tail slope above which the ratio is considered to grow.
pub const INTEGRAL_TAIL_TOL: f64 = 0.05;

/// `∫₀ᵗ (1+t−s)^{−γ1} (1+s)^{−γ2} ds`.
pub fn convolution_integral(gamma1: f64, gamma2: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let f = |s: f64| (1.0 + t - s).powf(-gamma1) * (1.0 + s).powf(-gamma2);
    let mid = 0.5 * t;
    let de = |a: f64, b: f64| quadrature::double_exponential::integrate(f, a, b, 1e-13).integral;
    de(0.0, mid) + de(mid, t)
}

fn check_convolution_case(g1: f64, g2: f64) -> Result<()> {
    if !(g1 > 0.0 && g2 > 0.0 && g1.is_finite() && g2.is_finite()) {
        return Err(Error::InvalidParameter(format!("exponents must be positive, got ({g1}, {g2})")));
    }
    let ok = (g1 != 1.0 && g2 != 1.0) || (g1 == 1.0 && g2 > 1.0);
    if !ok {
        return Err(Error::InvalidParameter(format!(
            "({g1}, {g2}) is outside the covered cases: need both exponents different from 1, \
             or γ1 = 1 < γ2; with an exponent equal to 1 otherwise the integral picks up a log factor"
        )));
    }
    Ok(())
}

/// Evaluates the convolution integral on `t_grid` and tests that it decays
/// like `(1+t)^{−min{γ1+γ2−1, γ1, γ2}}`.
pub fn verify_convolution_decay(gamma1: f64, gamma2: f64, t_grid: &[f64]) -> Result<ConvolutionDecayReport> {
    check_convolution_case(gamma1, gamma2)?;
    Ok(integral_report(gamma1, gamma2, t_grid))
}

fn integral_report(gamma1: f64, gamma2: f64, t_grid: &[f64]) -> ConvolutionDecayReport {
    let exponent = (gamma1 + gamma2 - 1.0).min(gamma1).min(gamma2);
    let values: Vec<(f64, f64, f64)> = t_grid
        .par_iter()
        .map(|&t| {
            let i = convolution_integral(gamma1, gamma2, t);
            (t, i, i * (1.0 + t).powf(exponent))
        })
        .collect();
    let sup_ratio = values.iter().map(|v| v.2).fold(0.0, f64::max);
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let tail: Vec<_> = values.iter().filter(|v| v.0 >= t_max / 10.0 && v.2 > 0.0).collect();
    let tail_slope = if tail.len() >= 3 {
        let x: Vec<f64> = tail.iter().map(|v| (1.0 + v.0).ln()).collect();
        let y: Vec<f64> = tail.iter().map(|v| v.2.ln()).collect();
        ols(&x, &y).map_or(f64::NAN, |f| f.slope)
    } else {
        0.0
    };
    ConvolutionDecayReport {
        gamma1,
        gamma2,
        exponent,
        bounded: sup_ratio.is_finite() && tail_slope <= INTEGRAL_TAIL_TOL,
        values,
        sup_ratio,
        tail_slope,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub vertex_count: usize,
    pub method: String,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `|λ_max|`; zero up to rounding since constants are in the kernel.
    pub distance_to_zero: f64,
    /// Largest eigenvalue below the kernel, i.e. minus the spectral gap.
    pub second_largest: f64,
    pub smallest: Vec<f64>,
    pub largest: Vec<f64>,
    pub symmetric: bool,
}

pub const SPECTRUM_VERTEX_LIMIT: usize = 10_000;
const DENSE_SPECTRUM_LIMIT: usize = 2_500;

/// Unnormalized linearization `L` as a sparse matrix.
pub fn linearization_matrix(bundle: &InducedGraphBundle) -> CsrMatrix {
    let g = bundle.base();
    let n = g.vertex_count();
    let mut trips = Vec::with_capacity(n + 2 * g.edges().len());
    for v in 0..n {
        let mut deg = 0.0;
        for (u, w) in g.neighbors(v) {
            trips.push((v, u, w));
            deg += w;
        }
        trips.push((v, v, -deg));
    }
    CsrMatrix::from_triplets(n, n, trips)
}

/// Extreme eigenvalues of the unnormalized linearization.
pub fn spectrum_probe(bundle: &InducedGraphBundle, k: usize) -> Result<SpectrumSummary> {
    let n = bundle.vertex_count();
    if n > SPECTRUM_VERTEX_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "spectrum probe is limited to {SPECTRUM_VERTEX_LIMIT} vertices, got {n}"
        )));
    }
    let a = linearization_matrix(bundle);
    let symmetric = a.is_symmetric(1e-12);
    let (mut eig, method) = if n <= DENSE_SPECTRUM_LIMIT {
        let dense: DMatrix<f64> = a.to_dense();
        (SymmetricEigen::new(dense).eigenvalues.as_slice().to_vec(), "dense")
    } else {
        (lanczos_ritz(n, 400, 0x5eed, |x, y| a.matvec(x, y)), "lanczos")
    };
    eig.sort_by(f64::total_cmp);
    let k = k.clamp(1, eig.len());
    let lambda_max = *eig.last().unwrap();
    Ok(SpectrumSummary {
        vertex_count: n,
        method: method.into(),
        lambda_min: eig[0],
        lambda_max,
        distance_to_zero: lambda_max.abs(),
        second_largest: if eig.len() > 1 { eig[eig.len() - 2] } else { f64::NAN },
        smallest: eig[..k].to_vec(),
        largest: eig[eig.len() - k..].to_vec(),
        symmetric,
    })
}

/// Vertex nearest lattice coordinates `(i, j)`, for probe placement.
pub fn vertex_near(g: &WeightedGraph, i: i64, j: i64) -> Option<usize> {
    g.vertex_at(Coord::Plane(i, j)).or_else(|| g.vertex_at(Coord::Line(i))).map(|v| v.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::unit_lattice;
    use crate::graph::LatticeShape;

    #[test]
    fn integral_closed_forms() {
        // γ1 = 0.5, γ2 = 0.5 ⇒ ∫ ((1+t−s)(1+s))^{-1/2} ds = 2 asin(t/(2+t))
        for t in [0.5, 3.0, 40.0, 900.0] {
            let i = convolution_integral(0.5, 0.5, t);
            let e = 2.0 * (t / (2.0 + t)).asin();
            assert!((i - e).abs() < 1e-10 * e.max(1.0), "t={t}: {i} vs {e}");
        }
        assert_eq!(convolution_integral(1.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn convolution_decay_cases() {
        let grid = crate::fit::geomspace(1.0, 1e3, 40);
        for (g1, g2) in [(0.5, 2.0), (1.0, 2.0)] {
            let rep = verify_convolution_decay(g1, g2, &grid).unwrap();
            assert!(rep.bounded, "({g1}, {g2}) tail slope {}", rep.tail_slope);
        }
        assert!(verify_convolution_decay(1.0, 1.0, &grid).is_err());
        assert!(verify_convolution_decay(2.0, 1.0, &grid).is_err());
        // the excluded pair really carries a log factor
        assert!(!integral_report(1.0, 1.0, &grid).bounded);
    }

    #[test]
    fn remainder_bound_small_lattice() {
        let sys = sine_lattice(11, Boundary::Free, 0.0).unwrap();
        let sol = trivial_lags(&sys).unwrap();
        let rep = verify_remainder_bound(&sys, &sol, 300, 0.5, 3).unwrap();
        assert_eq!(rep.violations, 0, "max ratio {}", rep.max_ratio);
        assert!(rep.max_ratio <= 1.0);
        assert!((rep.k1 - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn remainder_vanishes_on_zero_and_gauge() {
        let sys = sine_lattice(7, Boundary::Torus, 0.0).unwrap();
        let sol = trivial_lags(&sys).unwrap();
        let b = linearize(&sys, &sol).unwrap();
        let zero = sys.nonlinear_remainder(&sol, &b, &vec![0.0; 49]).unwrap();
        assert_eq!(zero.norm(Norm::L1), 0.0);
        let shift = sys.nonlinear_remainder(&sol, &b, &vec![0.3; 49]).unwrap();
        assert!(shift.norm(Norm::L1) < 1e-15);
        assert_eq!(q_form(sys.neighborhoods(), &[0.3; 49]).unwrap(), 0.0);
    }

    #[test]
    fn alternating_state_saturates_q() {
        let g = unit_lattice(LatticeShape::square(10), Boundary::Torus).unwrap();
        let nb = Neighborhoods::from_graph(&g);
        let rep = verify_q_bound(&g, &nb, 50, 1).unwrap();
        assert_eq!(rep.violations_4d, 0);
        assert_eq!(rep.alternating_ratio, Some(4.0));
    }

    #[test]
    fn q_decay_constant_is_degenerate() {
        let sys = sine_lattice(9, Boundary::Torus, 0.0).unwrap();
        let b = linearize(&sys, &trivial_lags(&sys).unwrap()).unwrap();
        let rep = verify_q_semigroup_decay(&b, &[1.0; 81], &[1.0, 2.0]).unwrap();
        assert!(rep.degenerate);
    }

    #[test]
    fn spectrum_of_small_torus() {
        let sys = sine_lattice(8, Boundary::Torus, 0.0).unwrap();
        let b = linearize(&sys, &trivial_lags(&sys).unwrap()).unwrap();
        let s = spectrum_probe(&b, 3).unwrap();
        assert!(s.symmetric);
        assert!(s.distance_to_zero < 1e-12);
        assert!((s.lambda_min + 8.0).abs() < 1e-12);
        // 2 − 2cos(2π/8) is the first nonzero mode
        let gap = 2.0 - 2.0 * (std::f64::consts::TAU / 8.0).cos();
        assert!((s.second_largest + gap).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_nonpositive_eps() {
        let cfg = StabilityExperimentConfig { eps: 0.0, ..Default::default() };
        assert!(matches!(run_stability_experiment(&cfg), Err(Error::InvalidParameter(_))));
    }
}
