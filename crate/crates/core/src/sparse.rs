//! Compressed sparse rows, a geometric multigrid V-cycle with Galerkin coarse
//! operators, and preconditioned conjugate gradients.
//!
//! The smoother is damped Jacobi so that the preconditioner does not depend on
//! node ordering; mirrored problems then produce mirrored iterates.

use crate::linalg::Cholesky;

#[derive(Debug, Clone)]
pub(crate) struct Csr {
    pub rows: usize,
    pub cols_count: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn spmv(&self, x: &[f64], y: &mut [f64]) {
        for (row, out) in y.iter_mut().enumerate().take(self.rows) {
            let mut s = 0.0;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = s;
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.cols_count + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.cols_count {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0; self.vals.len()];
        for row in 0..self.rows {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                let c = self.cols[k] as usize;
                let dst = next[c];
                cols[dst] = row as u32;
                vals[dst] = self.vals[k];
                next[c] += 1;
            }
        }
        Csr { rows: self.cols_count, cols_count: self.rows, row_ptr, cols, vals }
    }

    /// `R A P` with `R = Pᵀ`, row by row through a dense accumulator.
    pub fn galerkin(a: &Csr, p: &Csr, r: &Csr) -> Csr {
        let n = r.rows;
        let mut acc = vec![0.0; n];
        let mut seen = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for big in 0..n {
            touched.clear();
            for kr in r.row_ptr[big]..r.row_ptr[big + 1] {
                let i = r.cols[kr] as usize;
                let ri = r.vals[kr];
                for ka in a.row_ptr[i]..a.row_ptr[i + 1] {
                    let j = a.cols[ka] as usize;
                    let ra = ri * a.vals[ka];
                    for kp in p.row_ptr[j]..p.row_ptr[j + 1] {
                        let col = p.cols[kp] as usize;
                        if seen[col] != big {
                            seen[col] = big;
                            acc[col] = 0.0;
                            touched.push(col);
                        }
                        acc[col] += ra * p.vals[kp];
                    }
                }
            }
            touched.sort_unstable();
            let mut diag_present = false;
            for &col in &touched {
                let v = acc[col];
                if col == big {
                    diag_present = v != 0.0;
                    if !diag_present {
                        continue;
                    }
                } else if v == 0.0 {
                    continue;
                }
                cols.push(col as u32);
                vals.push(v);
            }
            if !diag_present {
                // Decoupled coarse node (all of its fine support is fixed):
                // an identity row keeps the operator nonsingular.
                let start = row_ptr[big];
                let pos = cols[start..].partition_point(|&c| (c as usize) < big) + start;
                cols.insert(pos, big as u32);
                vals.insert(pos, 1.0);
            }
            row_ptr.push(cols.len());
        }
        Csr { rows: n, cols_count: n, row_ptr, cols, vals }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|row| {
                (self.row_ptr[row]..self.row_ptr[row + 1])
                    .find(|&k| self.cols[k] as usize == row)
                    .map(|k| self.vals[k])
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// `sweeps` damped Jacobi steps; rows with a zero diagonal are left alone.
    fn jacobi(&self, diag_inv: &[f64], x: &mut [f64], b: &[f64], sweeps: usize, tmp: &mut [f64]) {
        for _ in 0..sweeps {
            self.spmv(x, tmp);
            for i in 0..self.rows {
                x[i] += JACOBI_WEIGHT * diag_inv[i] * (b[i] - tmp[i]);
            }
        }
    }

    fn to_dense(&self) -> Vec<f64> {
        let n = self.rows;
        let mut d = vec![0.0; n * n];
        for row in 0..n {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                d[row * n + self.cols[k] as usize] = self.vals[k];
            }
        }
        d
    }
}

/// Multilinear prolongation from the vertex-centred grid with half the cells
/// on every active axis. Rows of `fixed` fine nodes are left empty so that
/// corrections never touch Dirichlet values.
pub(crate) fn prolongation(shape: [usize; 3], dim: usize, fixed: &[bool]) -> (Csr, [usize; 3]) {
    let mut coarse = [1usize; 3];
    for a in 0..dim {
        coarse[a] = (shape[a] - 1) / 2 + 1;
    }
    let n_fine = shape.iter().product::<usize>();
    let n_coarse = coarse.iter().product::<usize>();
    let one_d = |i: usize| -> ([usize; 2], [f64; 2], usize) {
        if i.is_multiple_of(2) {
            ([i / 2, 0], [1.0, 0.0], 1)
        } else {
            ([(i - 1) / 2, i.div_ceil(2)], [0.5, 0.5], 2)
        }
    };
    let mut row_ptr = Vec::with_capacity(n_fine + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(8);
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let fine = i + shape[0] * (j + shape[1] * k);
                if !fixed[fine] {
                    let (ci, wi, ni) = one_d(i);
                    let (cj, wj, nj) = if dim >= 2 { one_d(j) } else { ([0, 0], [1.0, 0.0], 1) };
                    let (ck, wk, nk) = if dim >= 3 { one_d(k) } else { ([0, 0], [1.0, 0.0], 1) };
                    entries.clear();
                    for c in 0..nk {
                        for b in 0..nj {
                            for a in 0..ni {
                                let idx = ci[a] + coarse[0] * (cj[b] + coarse[1] * ck[c]);
                                entries.push((idx as u32, wi[a] * wj[b] * wk[c]));
                            }
                        }
                    }
                    entries.sort_unstable_by_key(|e| e.0);
                    for &(c, w) in &entries {
                        cols.push(c);
                        vals.push(w);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
    }
    (Csr { rows: n_fine, cols_count: n_coarse, row_ptr, cols, vals }, coarse)
}

const JACOBI_WEIGHT: f64 = 0.7;

struct Level {
    a: Csr,
    diag_inv: Vec<f64>,
    /// Prolongation from the next coarser level and its transpose.
    transfer: Option<(Csr, Csr)>,
}

enum CoarseSolve {
    Dense(Cholesky),
    Sweeps(usize),
}

/// Symmetric V-cycle, usable as an SPD preconditioner.
pub(crate) struct Multigrid {
    levels: Vec<Level>,
    coarse: CoarseSolve,
    smoothing: usize,
}

const DENSE_COARSE_LIMIT: usize = 350;
const COARSE_SWEEPS: usize = 60;

fn inverse(diag: Vec<f64>) -> Vec<f64> {
    diag.into_iter().map(|d| if d != 0.0 { 1.0 / d } else { 0.0 }).collect()
}

impl Multigrid {
    pub fn build(a: Csr, shape: [usize; 3], dim: usize, fixed: &[bool]) -> Self {
        let mut levels = Vec::new();
        let mut current = a;
        let mut shape = shape;
        let mut fixed: Vec<bool> = fixed.to_vec();
        loop {
            let n = current.rows;
            let can_coarsen = (0..dim).all(|a| (shape[a] - 1).is_multiple_of(2) && (shape[a] - 1) / 2 >= 2);
            if n <= DENSE_COARSE_LIMIT || !can_coarsen {
                let diag_inv = inverse(current.diagonal());
                levels.push(Level { a: current, diag_inv, transfer: None });
                break;
            }
            let (p, coarse_shape) = prolongation(shape, dim, &fixed);
            let r = p.transpose();
            let next = Csr::galerkin(&current, &p, &r);
            // Coarse nodes with no free fine support are fixed one level down.
            let mut next_fixed = vec![true; next.rows];
            for row in 0..p.rows {
                for k in p.row_ptr[row]..p.row_ptr[row + 1] {
                    next_fixed[p.cols[k] as usize] = false;
                }
            }
            let diag_inv = inverse(current.diagonal());
            levels.push(Level { a: current, diag_inv, transfer: Some((p, r)) });
            current = next;
            shape = coarse_shape;
            fixed = next_fixed;
        }
        let last = levels.last().unwrap();
        let coarse = if last.a.rows <= DENSE_COARSE_LIMIT {
            match Cholesky::factor(&last.a.to_dense(), last.a.rows) {
                Some(ch) => CoarseSolve::Dense(ch),
                None => CoarseSolve::Sweeps(COARSE_SWEEPS),
            }
        } else {
            CoarseSolve::Sweeps(COARSE_SWEEPS)
        };
        Self { levels, coarse, smoothing: 3 }
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.cycle(0, r, z);
    }

    fn cycle(&self, level: usize, b: &[f64], x: &mut [f64]) {
        let lv = &self.levels[level];
        x.iter_mut().for_each(|v| *v = 0.0);
        let Some((p, r)) = &lv.transfer else {
            match &self.coarse {
                CoarseSolve::Dense(ch) => {
                    x.copy_from_slice(b);
                    ch.solve_in_place(x);
                }
                CoarseSolve::Sweeps(n) => {
                    let mut tmp = vec![0.0; b.len()];
                    lv.a.jacobi(&lv.diag_inv, x, b, *n, &mut tmp);
                }
            }
            return;
        };
        let mut res = vec![0.0; b.len()];
        lv.a.jacobi(&lv.diag_inv, x, b, self.smoothing, &mut res);
        lv.a.spmv(x, &mut res);
        res.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let mut bc = vec![0.0; r.rows];
        r.spmv(&res, &mut bc);
        let mut xc = vec![0.0; r.rows];
        self.cycle(level + 1, &bc, &mut xc);
        let mut corr = vec![0.0; b.len()];
        p.spmv(&xc, &mut corr);
        x.iter_mut().zip(&corr).for_each(|(xi, ci)| *xi += ci);
        lv.a.jacobi(&lv.diag_inv, x, b, self.smoothing, &mut res);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients from the initial guess in `x`. Stops
/// when `|r| <= tol * |b|`.
pub(crate) fn pcg(a: &Csr, b: &[f64], x: &mut [f64], mg: &Multigrid, tol: f64, max_iter: usize) -> CgOutcome {
    let n = b.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let b_norm = norm(b).max(f64::MIN_POSITIVE);
    let mut r = vec![0.0; n];
    a.spmv(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut rel = norm(&r) / b_norm;
    if rel <= tol {
        return CgOutcome { iterations: 0, relative_residual: rel };
    }
    let mut z = vec![0.0; n];
    mg.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.spmv(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return CgOutcome { iterations: it, relative_residual: rel };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / b_norm;
        if rel <= tol {
            return CgOutcome { iterations: it, relative_residual: rel };
        }
        mg.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome { iterations: max_iter, relative_residual: rel }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 5-point Laplacian on an (m+1)^2 node grid with Dirichlet boundary rows.
    fn poisson(m: usize) -> (Csr, Vec<bool>, [usize; 3]) {
        let s = m + 1;
        let n = s * s;
        let mut fixed = vec![false; n];
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for j in 0..s {
            for i in 0..s {
                let idx = i + s * j;
                if i == 0 || j == 0 || i == m || j == m {
                    fixed[idx] = true;
                    cols.push(idx as u32);
                    vals.push(1.0);
                } else {
                    let mut entries = vec![(idx, 4.0)];
                    for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let ni = (i as i64 + di) as usize;
                        let nj = (j as i64 + dj) as usize;
                        if !(ni == 0 || nj == 0 || ni == m || nj == m) {
                            entries.push((ni + s * nj, -1.0));
                        }
                    }
                    entries.sort_by_key(|e| e.0);
                    for (c, v) in entries {
                        cols.push(c as u32);
                        vals.push(v);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        (Csr { rows: n, cols_count: n, row_ptr, cols, vals }, fixed, [s, s, 1])
    }

    #[test]
    fn multigrid_pcg_converges_in_few_iterations() {
        for m in [64, 256] {
            let (a, fixed, shape) = poisson(m);
            let n = a.rows;
            let b: Vec<f64> = (0..n).map(|i| if fixed[i] { 0.0 } else { ((i * 7919) % 13) as f64 - 6.0 }).collect();
            let mg = Multigrid::build(a.clone(), shape, 2, &fixed);
            let mut x = vec![0.0; n];
            let out = pcg(&a, &b, &mut x, &mg, 1e-10, 200);
            assert!(out.relative_residual <= 1e-10);
            assert!(out.iterations < 25, "m={m}: {} iterations", out.iterations);
        }
    }

    #[test]
    fn galerkin_of_identity_prolongation_is_ptp() {
        let (a, fixed, shape) = poisson(16);
        let (p, _) = prolongation(shape, 2, &fixed);
        let r = p.transpose();
        let ac = Csr::galerkin(&a, &p, &r);
        // symmetric
        let dense = ac.to_dense();
        let n = ac.rows;
        for i in 0..n {
            for j in 0..n {
                assert!((dense[i * n + j] - dense[j * n + i]).abs() < 1e-12);
            }
        }
    }
}
