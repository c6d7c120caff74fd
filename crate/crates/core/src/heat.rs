//! Heat semigroup `P_t = exp(t L)` of a normalized graph Laplacian.
//!
//! `P = I + L` is a stochastic matrix with entries `w(v,v')/m(v)` (loops on
//! the diagonal), so `exp(tL) = Σ_k Poisson(k; t) P^k`. The series is summed
//! with an explicit tail bound, which also gives the continuous-time random
//! walk its exact sampler: draw a Poisson number of jumps, then walk with
//! the law `w/m`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_power_law, DecayFit};
use crate::graph::{lp_norm, Norm, StateVector, WeightedGraph};
use crate::linalg::CsrMatrix;
use crate::linearize::InducedGraphBundle;

/// Absolute truncation tolerance of the Poisson series (per unit norm).
pub const SERIES_TOL: f64 = 1e-15;
const CHUNK_T: f64 = 200.0;
const WALK_CHUNK: usize = 16_384;

#[derive(Clone, Debug)]
pub struct HeatSemigroup {
    p: CsrMatrix,
    pt: CsrMatrix,
    measure: Vec<f64>,
    /// Per-row cumulative jump law aligned with `p`'s column indices.
    cumulative: Vec<f64>,
}

impl HeatSemigroup {
    /// Semigroup of the normalized Laplacian of `g`.
    pub fn from_graph(g: &WeightedGraph) -> Result<Self> {
        let n = g.vertex_count();
        let mut trips = Vec::new();
        for v in 0..n {
            let m = g.measure(v);
            if !(m > 0.0) {
                return Err(Error::IsolatedVertex(v));
            }
            let mut off = 0.0;
            for (u, w) in g.neighbors(v) {
                trips.push((v, u, w / m));
                off += w / m;
            }
            let stay = (1.0 - off).max(0.0);
            if stay > 0.0 {
                trips.push((v, v, stay));
            }
        }
        let p = CsrMatrix::from_triplets(n, n, trips);
        let pt = p.transpose();
        let mut cumulative = Vec::with_capacity(p.data.len());
        for v in 0..n {
            let mut acc = 0.0;
            let s = p.indptr[v];
            let e = p.indptr[v + 1];
            for k in s..e {
                acc += p.data[k];
                cumulative.push(if k + 1 == e { 1.0 } else { acc });
            }
        }
        Ok(HeatSemigroup { p, pt, measure: g.measures().to_vec(), cumulative })
    }

    /// Semigroup of the normalized generator `L̃` of a bundle.
    pub fn from_bundle(b: &InducedGraphBundle) -> Result<Self> {
        Self::from_graph(b.augmented())
    }

    pub fn vertex_count(&self) -> usize {
        self.measure.len()
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    /// One-step transition matrix `P`.
    pub fn jump_matrix(&self) -> &CsrMatrix {
        &self.p
    }

    fn series(&self, m: &CsrMatrix, x: &[f64], t: f64) -> Vec<f64> {
        let n = x.len();
        let mut out = vec![0.0; n];
        let mut term = x.to_vec();
        let mut next = vec![0.0; n];
        let mut w = (-t).exp();
        let mut k = 0usize;
        loop {
            for i in 0..n {
                out[i] += w * term[i];
            }
            let kf = k as f64;
            if kf > t {
                let w_next = w * t / (kf + 1.0);
                let tail = w_next / (1.0 - t / (kf + 2.0));
                if tail < SERIES_TOL {
                    break;
                }
            }
            m.matvec(&term, &mut next);
            std::mem::swap(&mut term, &mut next);
            k += 1;
            w *= t / k as f64;
        }
        out
    }

    fn propagate(&self, m: &CsrMatrix, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("time must be finite and nonnegative, got {t}")));
        }
        if x.len() != self.vertex_count() {
            return Err(Error::LengthMismatch { expected: self.vertex_count(), got: x.len() });
        }
        let mut y = x.to_vec();
        let mut left = t;
        while left > 0.0 {
            let dt = left.min(CHUNK_T);
            y = self.series(m, &y, dt);
            left -= dt;
        }
        Ok(y)
    }

    /// `P_t x`.
    pub fn apply(&self, x: &[f64], t: f64) -> Result<StateVector> {
        self.propagate(&self.p, x, t).map(Into::into)
    }

    /// `P_tᵀ x`; rows of `P_t` are `P_tᵀ δ_v`.
    pub fn apply_transpose(&self, x: &[f64], t: f64) -> Result<StateVector> {
        self.propagate(&self.pt, x, t).map(Into::into)
    }

    /// `P_t x` on an increasing time grid, stepping incrementally.
    pub fn apply_grid(&self, x: &[f64], times: &[f64]) -> Result<Vec<StateVector>> {
        self.grid(&self.p, x, times)
    }

    fn grid(&self, m: &CsrMatrix, x: &[f64], times: &[f64]) -> Result<Vec<StateVector>> {
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("time grid must be nondecreasing".into()));
        }
        let mut out = Vec::with_capacity(times.len());
        let mut cur = x.to_vec();
        let mut t_cur = 0.0;
        for &t in times {
            cur = self.propagate(m, &cur, t - t_cur)?;
            t_cur = t;
            out.push(cur.clone().into());
        }
        Ok(out)
    }

    /// Exact row `p_t(v, ·)`.
    pub fn transition_row(&self, v: usize, t: f64) -> Result<HeatKernelEstimate> {
        self.transition_rows(v, &[t])
    }

    /// Exact rows `p_t(v, ·)` on an increasing grid.
    pub fn transition_rows(&self, v: usize, times: &[f64]) -> Result<HeatKernelEstimate> {
        if v >= self.vertex_count() {
            return Err(Error::VertexOutOfRange(v));
        }
        let rows = self.grid(&self.pt, &StateVector::indicator(self.vertex_count(), v), times)?;
        Ok(HeatKernelEstimate {
            source: v,
            times: times.to_vec(),
            rows,
            method: KernelMethod::Exact,
            measure: self.measure.clone(),
        })
    }

    fn jump(&self, v: usize, u: f64) -> usize {
        let (s, e) = (self.p.indptr[v], self.p.indptr[v + 1]);
        let cum = &self.cumulative[s..e];
        let k = cum.partition_point(|&c| c <= u).min(e - s - 1);
        self.p.indices[s + k]
    }

    /// Endpoint of one continuous-time walk started at `v0`.
    pub fn sample_ctrw<R: Rng + ?Sized>(&self, v0: usize, t_end: f64, rng: &mut R) -> usize {
        if t_end <= 0.0 {
            return v0;
        }
        let jumps = Poisson::new(t_end).expect("positive rate").sample(rng) as u64;
        let mut v = v0;
        for _ in 0..jumps {
            v = self.jump(v, rng.random::<f64>());
        }
        v
    }

    /// Empirical row from `n_walks` walks. Walk `i` uses the ChaCha8 stream
    /// `i` of `seed`, so counts do not depend on scheduling.
    pub fn monte_carlo_row(&self, v0: usize, t: f64, n_walks: usize, seed: u64) -> Result<HeatKernelEstimate> {
        let n = self.vertex_count();
        if v0 >= n {
            return Err(Error::VertexOutOfRange(v0));
        }
        if !(t >= 0.0) || n_walks == 0 {
            return Err(Error::InvalidParameter("need t >= 0 and at least one walk".into()));
        }
        let chunks = n_walks.div_ceil(WALK_CHUNK);
        let counts = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut counts = vec![0u64; n];
                for i in c * WALK_CHUNK..((c + 1) * WALK_CHUNK).min(n_walks) {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    counts[self.sample_ctrw(v0, t, &mut rng)] += 1;
                }
                counts
            })
            .reduce(
                || vec![0u64; n],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        let row: StateVector = counts.iter().map(|&c| c as f64 / n_walks as f64).collect();
        Ok(HeatKernelEstimate {
            source: v0,
            times: vec![t],
            rows: vec![row],
            method: KernelMethod::MonteCarlo { samples: n_walks, seed },
            measure: self.measure.clone(),
        })
    }

    /// `‖P_t δ_v‖_p` for `p ∈ {1, 2, ∞}`; the maxima over `v` are the
    /// `1 → p` operator norms.
    pub fn column_norms(&self, v: usize, times: &[f64]) -> Result<Vec<ColumnNorms>> {
        if v >= self.vertex_count() {
            return Err(Error::VertexOutOfRange(v));
        }
        let cols = self.apply_grid(&StateVector::indicator(self.vertex_count(), v), times)?;
        Ok(times
            .iter()
            .zip(cols)
            .map(|(&t, c)| ColumnNorms { t, l1: c.norm(Norm::L1), l2: c.norm(Norm::L2), linf: c.norm(Norm::Linf) })
            .collect())
    }

    /// `max_v |p_t(v1,v3) − p_t(v2,v3)| / (m(v3) p_{2t}(v1,v3))` over `v3_set`,
    /// fitted as `t^{−η/2}`.
    pub fn fit_gradient_decay(
        &self,
        v1: usize,
        v2: usize,
        v3_set: &[usize],
        t_grid: &[f64],
        hop: u32,
    ) -> Result<GradientDecayFit> {
        if v1 == v2 {
            return Ok(GradientDecayFit { degenerate: true, ..Default::default() });
        }
        if v3_set.is_empty() {
            return Err(Error::InvalidParameter("empty target set".into()));
        }
        let mut all: Vec<f64> = t_grid.iter().flat_map(|&t| [t, 2.0 * t]).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let r1 = self.transition_rows(v1, &all)?;
        let r2 = self.transition_rows(v2, t_grid)?;
        let idx = |t: f64| all.iter().position(|&s| s == t).expect("time present");
        let mut ratios = Vec::with_capacity(t_grid.len());
        for (k, &t) in t_grid.iter().enumerate() {
            let (a, b, c) = (&r1.rows[idx(t)], &r2.rows[k], &r1.rows[idx(2.0 * t)]);
            let r = v3_set.iter().map(|&v3| (a[v3] - b[v3]).abs() / (self.measure[v3] * c[v3])).fold(0.0, f64::max);
            ratios.push((t, r));
        }
        let (ts, rs): (Vec<f64>, Vec<f64>) = ratios.iter().copied().unzip();
        let fit = fit_power_law("gradient_ratio", &ts, &rs, (ts[0], *ts.last().unwrap()))?;
        let eta = -2.0 * fit.slope;
        let d = hop.max(1) as f64;
        let constant = ratios.iter().map(|&(t, r)| r * (t.sqrt() / d).powf(eta)).fold(0.0, f64::max);
        Ok(GradientDecayFit {
            degenerate: false,
            eta,
            eta_stderr: 2.0 * fit.slope_stderr,
            constant,
            bounded: rs.iter().all(|r| r.is_finite()),
            fit: Some(fit),
            ratios,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnNorms {
    pub t: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientDecayFit {
    pub degenerate: bool,
    pub eta: f64,
    pub eta_stderr: f64,
    pub constant: f64,
    pub bounded: bool,
    pub fit: Option<DecayFit>,
    pub ratios: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum KernelMethod {
    Exact,
    #[serde(rename = "uniformized")]
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelEstimate {
    pub source: usize,
    pub times: Vec<f64>,
    pub rows: Vec<StateVector>,
    pub method: KernelMethod,
    #[serde(skip)]
    pub measure: Vec<f64>,
}

impl HeatKernelEstimate {
    pub fn row_sum(&self, k: usize) -> f64 {
        self.rows[k].iter().sum()
    }

    /// Mass missing from row `k` (zero up to rounding for stochastic rows).
    pub fn leak(&self, k: usize) -> f64 {
        1.0 - self.row_sum(k)
    }

    /// Symmetric density `q_t(v,·) = p_t(v,·)/m(·)`.
    pub fn density(&self, k: usize) -> StateVector {
        self.rows[k].iter().zip(&self.measure).map(|(p, m)| p / m).collect()
    }

    /// `p_t(v, v)` across the grid.
    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[self.source]).collect()
    }

    pub fn min_entry(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.iter().copied()).fold(f64::INFINITY, f64::min)
    }
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Standard-deviation scale of the multinomial TV statistic:
/// `½ Σ sqrt(p_i (1 − p_i) / N)`.
pub fn multinomial_tv_scale(p: &[f64], n: usize) -> f64 {
    0.5 * p.iter().map(|&x| (x.max(0.0) * (1.0 - x).max(0.0) / n as f64).sqrt()).sum::<f64>()
}

/// Log–log fit of `value` against `t` inside `window`.
pub fn fit_decay(quantity: &str, series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let (t, v): (Vec<f64>, Vec<f64>) = series.iter().copied().unzip();
    fit_power_law(quantity, &t, &v, window)
}

/// Default fit window `[5, 0.4 R²]` for a graph of lattice radius `R`.
pub fn default_window(g: &WeightedGraph) -> (f64, f64) {
    let r = g.lattice_radius().unwrap_or(10.0);
    (5.0, 0.4 * r * r)
}

/// `‖x‖_p` shorthand used by contraction checks.
pub fn norm_ratio(y: &[f64], x: &[f64], p: Norm) -> f64 {
    lp_norm(y, p) / lp_norm(x, p)
}
