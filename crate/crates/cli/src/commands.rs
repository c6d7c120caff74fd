use std::fs;
use std::path::Path;

use phaselock::experiments::{
    build_family, largest_passing_eps, run_stability_experiment, spectrum_probe, verify_convolution_decay,
    verify_q_bound, verify_q_semigroup_decay, verify_remainder_bound, vg_radii, GateOptions, StabilityExperimentConfig,
    StabilityReport,
};
use phaselock::fit::{fit_power_law, geomspace};
use phaselock::graph::{Boundary, Coord, GraphJson, VertexId, WeightedGraph};
use phaselock::heat::{multinomial_tv_scale, total_variation, HeatSemigroup};
use phaselock::linearize::{check_hypotheses, linearize, HypothesisReport, InducedGraphBundle};
use phaselock::phase::{PerturbationInit, PerturbationShape, PhaseLockedSolution, PhaseSystem, SolutionJson};
use phaselock::property::{
    check_delta, check_rough_isometry, check_vg, default_centers, identity_map, poincare_survey, PairSampling,
    RoughConstants,
};
use phaselock::solutions::{
    doubly_periodic_lags, lag_field, rotating_wave_lags, sine_lattice, truncation_drift, verify_rotating_wave,
    RotatingWaveSpec,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    CheckArgs, Cli, Command, DecayArgs, FamilyArgs, FamilyKind, FamilySetup, FileConfig, Globals, HeatArgs,
    LinearizeArgs, PeriodicArgs, ProbeArgs, ProbeKind, RotwaveArgs,
};
use crate::error::CliError;
use crate::output::Artifacts;

struct Context {
    globals: Globals,
    file: FileConfig,
}

impl Context {
    fn artifacts(&self) -> Result<Artifacts, CliError> {
        Artifacts::create(&self.globals.out, self.globals.seed)
    }

    /// The hashed part of a run configuration.
    fn resolved<P: Serialize>(&self, params: P) -> Value {
        json!({ "seed": self.globals.seed, "params": params })
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let globals = Globals::resolve(cli, &file);
    if let Some(n) = globals.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Context { globals, file };
    let files = match &cli.command {
        Command::Solve(a) => solve(a, &ctx)?,
        Command::Linearize(a) => linearize_cmd(a, &ctx)?,
        Command::Heat(a) => heat(a, &ctx)?,
        Command::Check(a) => check(a, &ctx)?,
        Command::Rotwave(a) => rotwave(a, &ctx)?,
        Command::Periodic(a) => periodic(a, &ctx)?,
        Command::Decay(a) => decay(a, &ctx)?,
        Command::Probe(a) => probe(a, &ctx)?,
    };
    println!("{}: wrote {} to {}", cli.command.name(), files.join(", "), ctx.globals.out.display());
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.to_path_buf(), source })
}

fn load_graph(ctx: &Context, path: &Path) -> Result<WeightedGraph, CliError> {
    let json: GraphJson = read_json(&ctx.globals.input(path))?;
    Ok(WeightedGraph::from_json(&json)?)
}

fn locate(g: &WeightedGraph, at: &[i64]) -> Result<usize, CliError> {
    let coord = match at {
        [i] => Coord::Line(*i),
        [i, j] => Coord::Plane(*i, *j),
        _ => return Err(CliError::Config("positions take one or two coordinates".into())),
    };
    g.vertex_at(coord).map(|v| v.0).ok_or_else(|| CliError::Config(format!("no vertex at {coord}")))
}

fn pair<T: Copy>(v: &[T], what: &str) -> Result<(T, T), CliError> {
    match v {
        [a, b] => Ok((*a, *b)),
        _ => Err(CliError::Config(format!("{what} takes exactly two values"))),
    }
}

#[derive(Serialize)]
struct LagRow {
    i: i64,
    j: i64,
    theta: f64,
}

fn write_solution(art: &mut Artifacts, sys: &PhaseSystem, sol: &PhaseLockedSolution) -> Result<(), CliError> {
    art.json("solution.json", &SolutionJson::new(sys, sol)?)?;
    art.json("graph.json", &sys.topology().to_json())?;
    art.csv("lags.csv", lag_field(sys, sol).into_iter().map(|(i, j, theta)| LagRow { i, j, theta }))
}

fn build(setup: &FamilySetup) -> Result<(PhaseSystem, PhaseLockedSolution), CliError> {
    Ok(build_family(setup.family(), setup.extent, setup.boundary, setup.omega)?)
}

fn solve(a: &FamilyArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let setup = FamilySetup::resolve(a, &ctx.file);
    let (sys, sol) = build(&setup)?;
    let mut art = ctx.artifacts()?;
    write_solution(&mut art, &sys, &sol)?;
    println!(
        "{}: {} oscillators, Omega = {:.6}, residual {:.2e} after {} Newton iterations",
        setup.family().label(),
        sys.vertex_count(),
        sol.big_omega,
        sol.residual,
        sol.iterations
    );
    art.finish("solve", &ctx.resolved(setup))
}

fn first_failure(r: &HypothesisReport) -> Option<(&'static str, String)> {
    if !r.bounded_degree {
        return Some(("bounded_degree", format!("max degree {}", r.max_degree)));
    }
    if !r.weights_ok {
        let w = r.negative_pairs.first().or(r.asymmetric_pairs.first());
        let detail = w.map_or("weight check failed".into(), |w| {
            format!("pair ({}, {}) has H' = {} forward, {} backward", w.u, w.v, w.forward, w.backward)
        });
        return Some(("weights", detail));
    }
    if !r.connected {
        return Some(("connected", format!("induced graph has {} components", r.components)));
    }
    if r.metric_sup.is_none() {
        return Some(("metric", "an influence pair is unreachable".into()));
    }
    None
}

fn linearize_cmd(a: &LinearizeArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let setup = FamilySetup::resolve(&a.family, f);
    let solution = a.solution.clone().or_else(|| f.solution.clone());
    let (sys, sol, source) = match solution {
        Some(p) => {
            let graph = a
                .graph
                .clone()
                .or_else(|| f.graph.clone())
                .ok_or_else(|| CliError::Config("--solution needs --graph".into()))?;
            let sj: SolutionJson = read_json(&ctx.globals.input(&p))?;
            let (sys, sol) = sj.restore(load_graph(ctx, &graph)?)?;
            (sys, sol, json!({ "solution": p, "graph": graph }))
        }
        None => {
            let (sys, sol) = build(&setup)?;
            (sys, sol, serde_json::to_value(setup)?)
        }
    };
    let mut art = ctx.artifacts()?;
    let report = check_hypotheses(&sys, &sol)?;
    art.json("hypotheses.json", &report)?;
    if let Some((hypothesis, detail)) = first_failure(&report) {
        art.finish("linearize", &ctx.resolved(&source))?;
        return Err(phaselock::Error::GateRefused { hypothesis: hypothesis.into(), detail }.into());
    }
    let bundle = linearize(&sys, &sol)?;
    art.json("bundle.json", &bundle.to_json())?;
    println!(
        "D = {}, M = {:.6}, normalization {:.6}, loops {}, metric sup {}",
        report.max_degree,
        bundle.m_max(),
        bundle.normalization(),
        if bundle.loops_added() { "added" } else { "not needed" },
        report.metric_sup.map_or("-".into(), |d| d.to_string())
    );
    art.finish("linearize", &ctx.resolved(&source))
}

#[derive(Serialize)]
struct KernelRow {
    t: f64,
    p_vv: f64,
    row_sum: f64,
    leak: f64,
    l1: f64,
    l2: f64,
    linf: f64,
    interpolation_bound: f64,
}

fn heat(a: &HeatArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let setup = FamilySetup::resolve(&a.family, f);
    let graph_path = a.graph.clone().or_else(|| f.graph.clone());
    let (sg, g) = match &graph_path {
        Some(p) => {
            let g = load_graph(ctx, p)?;
            (HeatSemigroup::from_graph(&g)?, g)
        }
        None => {
            let (sys, sol) = build(&setup)?;
            let b = linearize(&sys, &sol)?;
            (HeatSemigroup::from_bundle(&b)?, b.augmented().clone())
        }
    };
    let source_at = a.source.clone().or_else(|| f.source.clone());
    let v = match &source_at {
        Some(at) => locate(&g, at)?,
        None => g.central_vertex(),
    };
    let t_min = a.t_min.or(f.t_min).unwrap_or(5.0);
    let t_max = a.t_max.or(f.t_max).unwrap_or(50.0);
    let points = a.points.or(f.points).unwrap_or(16);
    let times = match a.times.clone().or_else(|| f.times.clone()) {
        Some(t) => t,
        None => {
            if !(t_min > 0.0 && t_max > t_min) || points < 2 {
                return Err(CliError::Config(format!("time grid [{t_min}, {t_max}] with {points} points is empty")));
            }
            geomspace(t_min, t_max, points)
        }
    };
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
        return Err(CliError::Config("times must be positive and strictly increasing".into()));
    }
    let window = (times[0], *times.last().unwrap());
    let est = sg.transition_rows(v, &times)?;
    let cols = sg.column_norms(v, &times)?;
    let diag = est.diagonal();
    let rows: Vec<KernelRow> = cols
        .iter()
        .enumerate()
        .map(|(k, c)| KernelRow {
            t: c.t,
            p_vv: diag[k],
            row_sum: est.row_sum(k),
            leak: est.leak(k),
            l1: c.l1,
            l2: c.l2,
            linf: c.linf,
            interpolation_bound: (c.l1 * c.linf).sqrt(),
        })
        .collect();
    let l2: Vec<f64> = cols.iter().map(|c| c.l2).collect();
    let linf: Vec<f64> = cols.iter().map(|c| c.linf).collect();
    let fits = json!({
        "source": v,
        "window": window,
        "diagonal": fit_power_law("p_t(v,v)", &times, &diag, window)?,
        "l2": fit_power_law("l2", &times, &l2, window)?,
        "linf": fit_power_law("linf", &times, &linf, window)?,
        "interpolation_holds": rows.iter().all(|r| r.l2 <= r.interpolation_bound * (1.0 + 1e-12)),
        "min_entry": est.min_entry(),
    });
    let mut art = ctx.artifacts()?;
    art.csv("kernel.csv", &rows)?;
    println!(
        "source {v}: p_t(v,v) slope {:.4}, l2 slope {:.4} over [{:.3}, {:.3}]",
        fits["diagonal"]["slope"].as_f64().unwrap_or(f64::NAN),
        fits["l2"]["slope"].as_f64().unwrap_or(f64::NAN),
        window.0,
        window.1
    );
    art.json("fits.json", &fits)?;

    let walks = a.walks.or(f.walks);
    if let Some(walks) = walks {
        let t = a.mc_time.or(f.mc_time).unwrap_or(10.0);
        let exact = sg.transition_row(v, t)?;
        let mc = sg.monte_carlo_row(v, t, walks, ctx.globals.seed)?;
        let tv = total_variation(&exact.rows[0], &mc.rows[0]);
        let sigma = multinomial_tv_scale(&exact.rows[0], walks);
        println!("Monte Carlo at t = {t}: TV {tv:.3e}, 3 sigma bound {:.3e}", 3.0 * sigma);
        art.json(
            "mc.json",
            &json!({
                "n_samples": walks,
                "method": "uniformized",
                "provenance": mc.method,
                "t": t,
                "tv": tv,
                "sigma": sigma,
                "within_3_sigma": tv <= 3.0 * sigma,
            }),
        )?;
    }
    let params = json!({
        "family": if graph_path.is_none() { Some(setup) } else { None },
        "graph": graph_path,
        "source": v,
        "times": times,
        "walks": walks,
    });
    art.finish("heat", &ctx.resolved(params))
}

fn check(a: &CheckArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let setup = FamilySetup::resolve(&a.family, f);
    let graph_path = a.graph.clone().or_else(|| f.graph.clone());
    let g = match &graph_path {
        Some(p) => load_graph(ctx, p)?,
        None => {
            let (sys, sol) = build(&setup)?;
            linearize(&sys, &sol)?.augmented().clone()
        }
    };
    let rough_to = a.rough_to.clone().or_else(|| f.rough_to.clone());
    let (mut vg, mut delta, mut pi) =
        (a.vg || f.vg.unwrap_or(false), a.delta || f.delta_check.unwrap_or(false), a.pi || f.pi.unwrap_or(false));
    if !(vg || delta || pi || rough_to.is_some()) {
        (vg, delta, pi) = (true, true, true);
    }
    let defaults = GateOptions::default();
    let opts = GateOptions {
        vg_centers: a.centers.or(f.centers).unwrap_or(defaults.vg_centers),
        vg_r_min: a.r_min.or(f.r_min).unwrap_or(defaults.vg_r_min),
        vg_r_max: a.r_max.or(f.r_max).unwrap_or(defaults.vg_r_max),
        ..defaults
    };
    let pi_radii = a.pi_radii.clone().or_else(|| f.pi_radii.clone()).unwrap_or(defaults.pi_radii.to_vec());
    let centers = default_centers(&g, opts.vg_centers, opts.center_spread);

    let mut report = serde_json::Map::new();
    if vg {
        let radii = vg_radii(&g, &centers, &opts)?;
        let r = check_vg(&g, &centers, &radii)?;
        println!("VG: d = {:.4} (r2 {:.5}), c1 = {:.4}, c2 = {:.4}", r.d, r.r2, r.c1, r.c2);
        report.insert("vg".into(), serde_json::to_value(r)?);
    }
    if delta {
        let r = check_delta(&g)?;
        println!("Delta: alpha = {:.6} ({})", r.alpha, if r.pass { "pass" } else { "fail" });
        report.insert("delta".into(), serde_json::to_value(r)?);
    }
    if pi {
        let r = poincare_survey(&g, &centers, &pi_radii)?;
        println!("PI: sup constant {:.4} over {} balls", r.sup, r.per_ball.len());
        report.insert("pi".into(), serde_json::to_value(r)?);
    }
    let rough = a.rough.clone().or_else(|| f.rough.clone());
    let pairs = a.pairs.or(f.pairs).unwrap_or(PairSampling::default().random_pairs);
    if let Some(p) = &rough_to {
        let c = rough.as_deref().ok_or_else(|| CliError::Config("--rough-to needs --rough a,b,c,M".into()))?;
        let [ca, cb, cc, cm] = c else {
            return Err(CliError::Config("--rough takes four constants a,b,c,M".into()));
        };
        let candidate = RoughConstants { a: *ca, b: *cb, c: *cc, m: *cm };
        let reference = load_graph(ctx, p)?;
        let sampling = PairSampling { random_pairs: pairs, seed: ctx.globals.seed, ..PairSampling::default() };
        let cert = check_rough_isometry(&reference, &g, &identity_map(reference.vertex_count()), sampling, candidate)?;
        println!(
            "rough isometry: {} (b_min {:.3}, c_min {:.4})",
            if cert.pass() { "certified" } else { "not certified" },
            cert.b_min,
            cert.c_min
        );
        report.insert(
            "rough".into(),
            json!({
                "constants": candidate,
                "witnesses": { "distance": cert.distance_witness, "measure": cert.measure_witness },
                "pass": cert.pass(),
                "certificate": cert,
            }),
        );
    }
    let mut art = ctx.artifacts()?;
    art.json("property.json", &report)?;
    let params = json!({
        "family": if graph_path.is_none() { Some(setup) } else { None },
        "graph": graph_path,
        "checks": { "vg": vg, "delta": delta, "pi": pi },
        "gate": opts,
        "pi_radii": pi_radii,
        "rough_to": rough_to,
        "rough": rough,
        "pairs": pairs,
    });
    art.finish("check", &ctx.resolved(params))
}

fn rotwave(a: &RotwaveArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let extent = a.extent.or(f.extent).unwrap_or(100);
    let omega = a.omega.or(f.omega).unwrap_or(0.0);
    let rings = a.rings.or(f.rings).unwrap_or(2);
    let compare = a.compare.or(f.compare);
    let radius = a.drift_radius.or(f.drift_radius).unwrap_or(5);
    let spec = RotatingWaveSpec { omega, ..RotatingWaveSpec::new(extent) };
    let rw = rotating_wave_lags(&spec)?;
    let check = if rings == rw.check.excluded_rings {
        rw.check.clone()
    } else {
        verify_rotating_wave(&rw.system, &rw.solution, rings)?
    };
    let hypotheses = check_hypotheses(&rw.system, &rw.solution)?;
    let drift = match compare {
        Some(other) => {
            let rw2 = rotating_wave_lags(&RotatingWaveSpec { omega, ..RotatingWaveSpec::new(other) })?;
            Some(json!({ "extent": other, "radius": radius, "max_abs": truncation_drift(&rw, &rw2, radius) }))
        }
        None => None,
    };
    let mut art = ctx.artifacts()?;
    write_solution(&mut art, &rw.system, &rw.solution)?;
    println!(
        "rotating wave on {extent}x{extent}: residual {:.2e}, interior residual {:.2e}, weights in [{:.4}, {:.4}], metric sup {}",
        rw.solution.residual,
        check.max_interior_residual,
        check.weight_inf,
        check.weight_sup,
        hypotheses.metric_sup.map_or("-".into(), |d| d.to_string())
    );
    art.json("sector_check.json", &json!({ "check": check, "hypotheses": hypotheses, "drift": drift }))?;
    let params =
        json!({ "extent": extent, "omega": omega, "rings": rings, "compare": compare, "drift_radius": radius });
    art.finish("rotwave", &ctx.resolved(params))
}

fn periodic(a: &PeriodicArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let n1 = a.n1.or(f.n1).unwrap_or(5);
    let n2 = a.n2.or(f.n2).unwrap_or(5);
    let extent = a.extent.or(f.extent).unwrap_or(100);
    let omega = a.omega.or(f.omega).unwrap_or(0.0);
    let sys = sine_lattice(extent, Boundary::Torus, omega)?;
    let sol = doubly_periodic_lags(&sys, n1, n2)?;
    let bundle = linearize(&sys, &sol)?;
    let (w_min, w_max) = weight_range(&bundle);
    let mut art = ctx.artifacts()?;
    write_solution(&mut art, &sys, &sol)?;
    println!(
        "doubly periodic {n1}x{n2} on the {extent} torus: residual {:.2e}, measure {:.6}, weights in [{w_min:.6}, {w_max:.6}]",
        sol.residual,
        bundle.m_max()
    );
    art.json(
        "periodic.json",
        &json!({
            "n1": n1,
            "n2": n2,
            "residual": sol.residual,
            "measure": bundle.m_max(),
            "normalization": bundle.normalization(),
            "loops_added": bundle.loops_added(),
            "weight_min": w_min,
            "weight_max": w_max,
        }),
    )?;
    art.finish("periodic", &ctx.resolved(json!({ "n1": n1, "n2": n2, "extent": extent, "omega": omega })))
}

fn weight_range(b: &InducedGraphBundle) -> (f64, f64) {
    b.base().edges().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(e.w), hi.max(e.w)))
}

#[derive(Serialize)]
struct SweepRow {
    eps: f64,
    pass: Option<bool>,
    linf_slope: Option<f64>,
    l2_slope: Option<f64>,
    error: Option<String>,
}

fn print_report(r: &StabilityReport) {
    println!(
        "{}: d = {:.3}, linf slope {:.4} (target {:.3}), l2 slope {:.4} (target {:.3}), l1 sup ratio {:.3} -> {}",
        r.family,
        r.dimension,
        r.fits.linf.slope,
        r.linf_target,
        r.fits.l2.slope,
        r.l2_target,
        r.l1_sup_ratio,
        if r.verdict.pass { "PASS" } else { "FAIL" }
    );
    if !r.gate.pass {
        println!("gate refused ({}); integrated because --force was given", r.gate.failed.join(", "));
    }
}

fn decay(a: &DecayArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let setup = FamilySetup::resolve(&a.family, f);
    let defaults = StabilityExperimentConfig::default();
    let center = match a.at.clone().or_else(|| f.at.clone()) {
        Some(at) => Some(setup.vertex_index(&at)?),
        None => None,
    };
    let shape = match a.sigma.or(f.sigma) {
        Some(sigma) => PerturbationShape::Gaussian { sigma },
        None => PerturbationShape::Indicator,
    };
    let window = match a.window.clone().or_else(|| f.window.clone()) {
        Some(w) => Some(pair(&w, "--window")?),
        None => None,
    };
    let cfg = StabilityExperimentConfig {
        family: setup.family(),
        extent: setup.extent,
        boundary: setup.boundary,
        omega: setup.omega,
        perturbation: PerturbationInit { shape, center, seed: ctx.globals.seed },
        eps: a.eps.or(f.eps).unwrap_or(defaults.eps),
        remove_mean: !(a.keep_mean || f.keep_mean.unwrap_or(false)),
        window,
        horizon: a.horizon.or(f.horizon),
        n_out: a.points.or(f.points).unwrap_or(defaults.n_out),
        seed: ctx.globals.seed,
        force: a.force || f.force.unwrap_or(false),
        ..defaults
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    if let Some(eps_values) = a.eps_sweep.clone().or_else(|| f.eps_sweep.clone()) {
        if eps_values.is_empty() {
            return Err(CliError::Config("--eps-sweep needs at least one value".into()));
        }
        let (best, reports) = largest_passing_eps(&cfg, &eps_values);
        if let Some(Err(phaselock::Error::GateRefused { hypothesis, detail })) =
            reports.iter().find(|r| matches!(r, Err(phaselock::Error::GateRefused { .. })))
        {
            return Err(phaselock::Error::GateRefused { hypothesis: hypothesis.clone(), detail: detail.clone() }.into());
        }
        let rows: Vec<SweepRow> = eps_values
            .iter()
            .zip(&reports)
            .map(|(&eps, r)| match r {
                Ok(r) => SweepRow {
                    eps,
                    pass: Some(r.verdict.pass),
                    linf_slope: Some(r.fits.linf.slope),
                    l2_slope: Some(r.fits.l2.slope),
                    error: None,
                },
                Err(e) => SweepRow { eps, pass: None, linf_slope: None, l2_slope: None, error: Some(e.to_string()) },
            })
            .collect();
        let mut art = ctx.artifacts()?;
        art.csv("sweep.csv", &rows)?;
        art.json("sweep.json", &json!({ "largest_passing_eps": best, "runs": rows }))?;
        match best {
            Some(e) => println!("largest passing eps among {} tested: {e:e}", eps_values.len()),
            None => println!("no tested eps passed"),
        }
        return art.finish("decay", &ctx.resolved(json!({ "experiment": cfg, "eps_sweep": eps_values })));
    }

    let report = run_stability_experiment(&cfg)?;
    let mut art = ctx.artifacts()?;
    art.csv("trajectory.csv", &report.rows)?;
    art.json("report.json", &report)?;
    print_report(&report);
    art.finish("decay", &ctx.resolved(json!({ "experiment": cfg })))
}

fn probe(a: &ProbeArgs, ctx: &Context) -> Result<Vec<String>, CliError> {
    let f = &ctx.file;
    let kind = a.kind.or(f.kind).unwrap_or(ProbeKind::Spectrum);
    let mut setup = FamilySetup::resolve(&a.family, f);
    if a.family.extent.or(f.extent).is_none() {
        setup.extent = match setup.family {
            FamilyKind::Trivial => 41,
            FamilyKind::Rotwave | FamilyKind::Periodic => 40,
            FamilyKind::Chain => 401,
        };
    }
    let seed = ctx.globals.seed;
    let samples = a.samples.or(f.samples).unwrap_or(1000);
    let t_min = a.t_min.or(f.t_min);
    let t_max = a.t_max.or(f.t_max);
    let points = a.points.or(f.points);
    let mut art = ctx.artifacts()?;
    let params = match kind {
        ProbeKind::Integral => {
            let g1 = a.gamma1.or(f.gamma1).unwrap_or(0.5);
            let g2 = a.gamma2.or(f.gamma2).unwrap_or(2.0);
            let grid = geomspace(t_min.unwrap_or(1.0), t_max.unwrap_or(1000.0), points.unwrap_or(32));
            let r = verify_convolution_decay(g1, g2, &grid)?;
            println!(
                "integral ({g1}, {g2}): sup ratio {:.4}, tail slope {:.4}, {}",
                r.sup_ratio,
                r.tail_slope,
                if r.bounded { "bounded" } else { "unbounded" }
            );
            #[derive(Serialize)]
            struct Row {
                t: f64,
                integral: f64,
                ratio: f64,
            }
            art.csv("integral.csv", r.values.iter().map(|&(t, integral, ratio)| Row { t, integral, ratio }))?;
            art.json("integral.json", &r)?;
            json!({ "kind": kind, "gamma1": g1, "gamma2": g2, "grid": grid })
        }
        ProbeKind::Qbound => {
            let (sys, _) = build(&setup)?;
            let r = verify_q_bound(sys.topology(), sys.neighborhoods(), samples, seed)?;
            println!(
                "Q/|x|^2 max {:.4} with D = {}; {} samples above 2D, {} above 4D",
                r.max_ratio, r.degree, r.violations_2d, r.violations_4d
            );
            art.json("qbound.json", &r)?;
            json!({ "kind": kind, "family": setup, "samples": samples })
        }
        ProbeKind::Remainder => {
            let delta = a.delta.or(f.delta).unwrap_or(1.0);
            let (sys, sol) = build(&setup)?;
            let r = verify_remainder_bound(&sys, &sol, samples, delta, seed)?;
            println!(
                "remainder: K = {:.4}, max ratio {:.4}, {} violations in {} samples",
                r.constant, r.max_ratio, r.violations, r.samples
            );
            art.json("remainder.json", &r)?;
            json!({ "kind": kind, "family": setup, "samples": samples, "delta": delta })
        }
        ProbeKind::Spectrum => {
            let k = a.k.or(f.k).unwrap_or(5);
            let (sys, sol) = build(&setup)?;
            let r = spectrum_probe(&linearize(&sys, &sol)?, k)?;
            println!(
                "spectrum ({}): [{:.6}, {:.3e}], gap {:.6}",
                r.method, r.lambda_min, r.lambda_max, -r.second_largest
            );
            art.json("spectrum.json", &r)?;
            json!({ "kind": kind, "family": setup, "k": k })
        }
        ProbeKind::Qdecay => {
            let (sys, sol) = build(&setup)?;
            let bundle = linearize(&sys, &sol)?;
            let psi = sys.initial_perturbation(&PerturbationInit::indicator(), 1.0, true)?;
            let grid = geomspace(t_min.unwrap_or(1.0), t_max.unwrap_or(100.0), points.unwrap_or(24));
            let r = verify_q_semigroup_decay(&bundle, &psi, &grid)?;
            println!(
                "Q(P_t psi)/Q(psi) decay exponent eta/2 = {:.4} +/- {:.4}, nonincreasing {}",
                r.eta_half, r.eta_half_stderr, r.nonincreasing
            );
            art.json("qdecay.json", &r)?;
            json!({ "kind": kind, "family": setup, "grid": grid })
        }
        ProbeKind::Gradient => {
            let (sys, sol) = build(&setup)?;
            let bundle = linearize(&sys, &sol)?;
            let g = bundle.augmented();
            let v1 = g.central_vertex();
            let v2 = g
                .neighbors(v1)
                .map(|(u, _)| u)
                .find(|&u| u != v1)
                .ok_or_else(|| CliError::Config("centre vertex has no neighbours".into()))?;
            let targets = g.ball(VertexId(v1), 15);
            let grid = geomspace(t_min.unwrap_or(10.0), t_max.unwrap_or(100.0), points.unwrap_or(12));
            let r = HeatSemigroup::from_bundle(&bundle)?.fit_gradient_decay(v1, v2, &targets, &grid, 1)?;
            println!("gradient estimate: eta = {:.4} +/- {:.4}, constant {:.4}", r.eta, r.eta_stderr, r.constant);
            art.json("gradient.json", &json!({ "v1": v1, "v2": v2, "targets": targets.len(), "fit": r }))?;
            json!({ "kind": kind, "family": setup, "grid": grid })
        }
    };
    art.finish("probe", &ctx.resolved(params))
}
