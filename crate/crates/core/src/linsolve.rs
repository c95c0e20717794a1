//! Sparse symmetric linear algebra: triplet assembly into CSR, matrix-vector
//! products, Jacobi-preconditioned conjugate gradients for SPD systems, a
//! BiCGStab fallback for the nonsymmetric transport steps, and extreme
//! eigenvalue estimation for condition numbers.

use crate::Error;

/// Triplet accumulator. Duplicate entries are summed on finalization.
#[derive(Clone, Debug)]
pub struct CooMatrix {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl CooMatrix {
    pub fn new(dim: usize) -> Self {
        CooMatrix { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        if value != 0.0 {
            self.entries.push((row as u32, col as u32, value));
        }
    }

    /// Sorts, merges duplicates, and drops entries that cancelled to zero.
    pub fn finalize(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.dim + 1];
        let mut cols: Vec<u32> = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut i = 0;
        while i < self.entries.len() {
            let (r, c, mut v) = self.entries[i];
            let mut j = i + 1;
            while j < self.entries.len() && self.entries[j].0 == r && self.entries[j].1 == c {
                v += self.entries[j].2;
                j += 1;
            }
            if v != 0.0 {
                cols.push(c);
                vals.push(v);
                row_ptr[r as usize + 1] += 1;
            }
            i = j;
        }
        for r in 0..self.dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { dim: self.dim, row_ptr, cols, vals }
    }
}

/// Compressed sparse row matrix; symmetric matrices are stored in full.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn identity(dim: usize) -> CsrMatrix {
        CsrMatrix {
            dim,
            row_ptr: (0..=dim).collect(),
            cols: (0..dim as u32).collect(),
            vals: vec![1.0; dim],
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().zip(&self.vals[span]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for (r, dr) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                if c == r {
                    *dr = v;
                }
            }
        }
        d
    }

    /// Largest asymmetry |A - A^T| entry, for the symmetry invariant.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                let vt = self.get(c, r);
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for (cc, v) in self.row(r) {
            if cc == c {
                return v;
            }
        }
        0.0
    }

    /// A + scale * B on the union sparsity pattern.
    pub fn add_scaled(&self, other: &CsrMatrix, scale: f64) -> CsrMatrix {
        assert_eq!(self.dim, other.dim);
        let mut coo = CooMatrix::new(self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                coo.push(r, c, v);
            }
            for (c, v) in other.row(r) {
                coo.push(r, c, scale * v);
            }
        }
        coo.finalize()
    }

    /// Extracts the principal submatrix of the rows/columns flagged in `keep`.
    pub fn submatrix(&self, keep: &[bool]) -> CsrMatrix {
        assert_eq!(keep.len(), self.dim);
        let mut remap = vec![u32::MAX; self.dim];
        let mut count = 0u32;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = count;
                count += 1;
            }
        }
        let mut coo = CooMatrix::new(count as usize);
        for r in 0..self.dim {
            if remap[r] == u32::MAX {
                continue;
            }
            for (c, v) in self.row(r) {
                if remap[c] != u32::MAX {
                    coo.push(remap[r] as usize, remap[c] as usize, v);
                }
            }
        }
        coo.finalize()
    }

    /// Writes the matrix in coordinate text format, one "row col value" per line.
    pub fn dump_coordinate(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                writeln!(out, "{} {} {}", r, c, v)?;
            }
        }
        Ok(())
    }
}

/// Symmetric sparse operator with its right-hand side.
#[derive(Clone, Debug)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
}

/// Iteration count and residual trace of a solve.
#[derive(Clone, Debug)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
/// Converges to ||A x - b|| <= tol * ||b||.
pub fn solve_spd(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats), Error> {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let norm_b = norm(b);
    if norm_b == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats { iterations: 0, residual: 0.0, history: vec![0.0] },
        ));
    }
    let inv_diag: Vec<f64> =
        a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut history = vec![1.0];

    for it in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: norm(&r) / norm_b,
                history,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm(&r) / norm_b;
        history.push(rel);
        if rel <= tol {
            return Ok((x, SolveStats { iterations: it + 1, residual: rel, history }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap(),
        history,
    })
}

/// Jacobi-preconditioned BiCGStab for the nonsymmetric transport steps.
pub fn solve_bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats), Error> {
    let n = a.dim();
    let norm_b = norm(b);
    if norm_b == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats { iterations: 0, residual: 0.0, history: vec![0.0] },
        ));
    }
    let inv_diag: Vec<f64> =
        a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    a.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut history = vec![norm(&r) / norm_b];
    let mut t = vec![0.0; n];

    for it in 0..max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: *history.last().unwrap(),
                history,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat: Vec<f64> = p.iter().zip(&inv_diag).map(|(pi, di)| pi * di).collect();
        a.matvec(&phat, &mut v);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) / norm_b <= tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            let rel = norm(&s) / norm_b;
            history.push(rel);
            return Ok((x, SolveStats { iterations: it + 1, residual: rel, history }));
        }
        let shat: Vec<f64> = s.iter().zip(&inv_diag).map(|(si, di)| si * di).collect();
        a.matvec(&shat, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        let rel = norm(&r) / norm_b;
        history.push(rel);
        if rel <= tol {
            return Ok((x, SolveStats { iterations: it + 1, residual: rel, history }));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: *history.last().unwrap(),
        history,
    })
}

/// Extreme-eigenvalue ratio estimate for an SPD matrix.
#[derive(Clone, Copy, Debug)]
pub struct ConditionEstimate {
    pub kappa: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Set when an iteration hit its cap before the 10% target accuracy.
    pub approximate: bool,
}

/// Deterministic pseudo-random start vector (golden-ratio lattice).
fn start_vector(n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 * 0.618_033_988_749_895).fract();
            2.0 * t - 1.0
        })
        .collect();
    let s = norm(&v);
    for x in v.iter_mut() {
        *x /= s;
    }
    v
}

/// Power iteration for the largest eigenvalue and CG-based inverse iteration
/// for the smallest; the returned ratio targets 10% relative accuracy.
pub fn condition_estimate(a: &CsrMatrix) -> Result<ConditionEstimate, Error> {
    let n = a.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("empty system".into()));
    }
    let mut approximate = false;

    // largest eigenvalue by power iteration
    let mut v = start_vector(n);
    let mut av = vec![0.0; n];
    let mut lambda_max = 0.0;
    let mut converged = false;
    for _ in 0..500 {
        a.matvec(&v, &mut av);
        let lambda = dot(&v, &av);
        let nrm = norm(&av);
        if nrm == 0.0 {
            return Err(Error::Numeric("matrix annihilated the start vector".into()));
        }
        for i in 0..n {
            v[i] = av[i] / nrm;
        }
        if (lambda - lambda_max).abs() <= 1e-3 * lambda.abs() {
            lambda_max = lambda;
            converged = true;
            break;
        }
        lambda_max = lambda;
    }
    approximate |= !converged;

    // smallest eigenvalue by inverse power iteration
    let mut w = start_vector(n);
    let mut mu = 0.0;
    let mut converged = false;
    for _ in 0..200 {
        let (z, _) = solve_spd(a, &w, 1e-8, 40 * n.max(100))?;
        let nrm = norm(&z);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::Numeric("inverse iteration broke down".into()));
        }
        for i in 0..n {
            w[i] = z[i] / nrm;
        }
        a.matvec(&w, &mut av);
        let lambda = dot(&w, &av);
        if (lambda - mu).abs() <= 1e-3 * lambda.abs() {
            mu = lambda;
            converged = true;
            break;
        }
        mu = lambda;
    }
    approximate |= !converged;

    if mu <= 0.0 {
        return Err(Error::Numeric(format!("smallest eigenvalue estimate {mu} is not positive")));
    }
    Ok(ConditionEstimate { kappa: lambda_max / mu, lambda_max, lambda_min: mu, approximate })
}
