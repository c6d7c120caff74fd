//! Small sparse linear-algebra kit: CSR storage, Krylov solvers and a
//! Lanczos eigenvalue estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(trips.len());
        let mut data: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            debug_assert!(r < n_rows && c < n_cols);
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            data.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix { n_rows, n_cols, indptr, indices, data }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.indptr[r]..self.indptr[r + 1];
        self.indices[s.clone()].iter().copied().zip(self.data[s].iter().copied())
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n_rows) {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|r| self.row(r).find(|&(c, _)| c == r).map_or(0.0, |(_, v)| v)).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let trips = (0..self.n_rows).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v))).collect();
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, trips)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        let t = self.transpose();
        t.indptr == self.indptr
            && t.indices == self.indices
            && t.data.iter().zip(&self.data).all(|(a, b)| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KrylovOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions { rel_tol: 1e-13, max_iter: 20_000, restart: 60 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense LU solve; `None` when the matrix is numerically singular.
pub fn dense_solve(a: &CsrMatrix, b: &[f64]) -> Option<Vec<f64>> {
    let lu = a.to_dense().lu();
    let x = lu.solve(&DVector::from_column_slice(b))?;
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}

/// Jacobi-preconditioned conjugate gradients for symmetric definite
/// systems (either sign). Returns `None` on breakdown or stagnation.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], opts: KrylovOptions) -> Option<Vec<f64>> {
    let n = b.len();
    let diag = a.diagonal();
    if diag.contains(&0.0) {
        return None;
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Some(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..opts.max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap == 0.0 || !pap.is_finite() {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= opts.rel_tol * bnorm {
            return Some(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

/// Restarted GMRES with right Jacobi preconditioning.
pub fn gmres(a: &CsrMatrix, b: &[f64], opts: KrylovOptions) -> Option<Vec<f64>> {
    let n = b.len();
    let diag: Vec<f64> = a.diagonal().into_iter().map(|d| if d != 0.0 { d } else { 1.0 }).collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Some(vec![0.0; n]);
    }
    let m = opts.restart.max(1);
    let mut x = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut total = 0;
    while total < opts.max_iter {
        a.matvec(&x, &mut work);
        let r: Vec<f64> = b.iter().zip(&work).map(|(bi, wi)| bi - wi).collect();
        let beta = norm2(&r);
        if beta <= opts.rel_tol * bnorm {
            return Some(x);
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let zk: Vec<f64> = v[k].iter().zip(&diag).map(|(vi, d)| vi / d).collect();
            let mut w = vec![0.0; n];
            a.matvec(&zk, &mut w);
            for (j, vj) in v.iter().enumerate() {
                let hjk = dot(&w, vj);
                h[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * vj[i];
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                return None;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= opts.rel_tol * bnorm || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * v[j][i] / diag[i];
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    a.matvec(&x, &mut work);
    let res: f64 = norm2(&b.iter().zip(&work).map(|(bi, wi)| bi - wi).collect::<Vec<_>>());
    (res <= opts.rel_tol * bnorm * 1e3).then_some(x)
}

/// Ritz values of a symmetric operator after `steps` Lanczos iterations with
/// full reorthogonalization, sorted ascending.
pub fn lanczos_ritz<F>(n: usize, steps: usize, seed: u64, apply: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let steps = steps.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let qn = norm2(&q);
    q.iter_mut().for_each(|x| *x /= qn);
    let mut basis = vec![q];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    for k in 0..steps {
        apply(&basis[k], &mut w);
        let a = dot(&w, &basis[k]);
        alpha.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for i in 0..n {
                    w[i] -= c * b[i];
                }
            }
        }
        let bn = norm2(&w);
        if k + 1 == steps || bn < 1e-12 {
            break;
        }
        beta.push(bn);
        basis.push(w.iter().map(|x| x / bn).collect());
    }
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; b.len()];
        a.matvec(x, &mut ax);
        ax.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, 3.0)]);
        assert_eq!(m.to_dense()[(0, 1)], 3.0);
        assert!(m.is_symmetric(0.0));
    }

    #[test]
    fn solvers_agree_with_dense() {
        let a = laplacian_1d(80, 0.01);
        let b: Vec<f64> = (0..80).map(|i| (i as f64).sin()).collect();
        let xd = dense_solve(&a, &b).unwrap();
        let xc = conjugate_gradient(&a, &b, KrylovOptions::default()).unwrap();
        let xg = gmres(&a, &b, KrylovOptions::default()).unwrap();
        assert!(residual(&a, &xd, &b) < 1e-10);
        assert!(residual(&a, &xc, &b) < 1e-9);
        assert!(residual(&a, &xg, &b) < 1e-9);
    }

    #[test]
    fn gmres_nonsymmetric() {
        let mut t = Vec::new();
        for i in 0..50 {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((i, i - 1, -1.5));
            }
            if i + 1 < 50 {
                t.push((i, i + 1, -0.5));
            }
        }
        let a = CsrMatrix::from_triplets(50, 50, t);
        assert!(!a.is_symmetric(1e-12));
        let b = vec![1.0; 50];
        let x = gmres(&a, &b, KrylovOptions::default()).unwrap();
        assert!(residual(&a, &x, &b) < 1e-10);
    }

    #[test]
    fn lanczos_extremes_of_path_laplacian() {
        let n = 60;
        let a = laplacian_1d(n, 0.0);
        let ritz = lanczos_ritz(n, n, 3, |x, y| a.matvec(x, y));
        let exact_max = 2.0 - 2.0 * (std::f64::consts::PI * n as f64 / (n as f64 + 1.0)).cos();
        let exact_min = 2.0 - 2.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((ritz.last().unwrap() - exact_max).abs() < 1e-9);
        assert!((ritz[0] - exact_min).abs() < 1e-9);
    }
}
