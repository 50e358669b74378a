//! Sparse assembly and a banded direct solver for grid operators.
//!
//! Grid matrices from 5-point stencils have bandwidth `nx`, so banded LU is
//! a direct method with `O(n nx^2)` work. No pivoting is done; the matrices
//! assembled here are (row or column) diagonally dominant M-matrices, for
//! which elimination without pivoting is stable.

use crate::error::{Error, Result};

/// Row-wise sparse matrix used during assembly.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, rows: vec![Vec::new(); n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Accumulates `v` into entry `(r, c)`.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let row = &mut self.rows[r];
        match row.iter_mut().find(|(cc, _)| *cc == c) {
            Some(e) => e.1 += v,
            None => row.push((c, v)),
        }
    }

    pub fn clear_row(&mut self, r: usize) {
        self.rows[r].clear();
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn scale_row(&mut self, r: usize, s: f64) {
        for e in &mut self.rows[r] {
            e.1 *= s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Infinity norm of the matrix.
    pub fn norm_inf(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| row.iter().map(|e| e.1.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `|A x - b|_inf / (|A|_inf |x|_inf + |b|_inf)`.
    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.matvec(x);
        let r = ax
            .iter()
            .zip(b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let xn = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let bn = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let denom = self.norm_inf() * xn + bn;
        if denom == 0.0 {
            r
        } else {
            r / denom
        }
    }

    fn bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    /// Direct solve through banded LU; the bandwidth is taken from the
    /// assembled pattern and `hint` only serves as a lower bound.
    pub fn solve_banded(&self, rhs: &[f64], hint: usize) -> Result<Vec<f64>> {
        let w = self.bandwidth().max(hint.min(self.n.saturating_sub(1)));
        let mut lu = BandedLu::factor(self, w)?;
        let x = lu.solve(rhs);
        let res = self.relative_residual(&x, rhs);
        if !res.is_finite() || res > 1e-8 {
            return Err(Error::Singular(format!(
                "banded LU residual {res:e} (n = {}, bandwidth = {w})",
                self.n
            )));
        }
        lu.release();
        Ok(x)
    }
}

/// LU factors of a band matrix, stored row-major with `2w + 1` slots per row.
struct BandedLu {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandedLu {
    fn factor(m: &SparseMatrix, w: usize) -> Result<Self> {
        let n = m.n;
        let stride = 2 * w + 1;
        let mut data = vec![0.0; n * stride];
        for (r, row) in m.rows.iter().enumerate() {
            for &(c, v) in row {
                data[r * stride + (c + w - r)] += v;
            }
        }
        let scale = m.norm_inf().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let pivot = data[k * stride + w];
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(Error::Singular(format!(
                    "zero pivot {pivot:e} at row {k} (matrix norm {scale:e})"
                )));
            }
            let last = (k + w).min(n - 1);
            let (head, tail) = data.split_at_mut((k + 1) * stride);
            let prow = &head[k * stride + w..k * stride + w + (last - k) + 1];
            for i in k + 1..=last {
                let off = i * stride - (k + 1) * stride;
                // Entry (i, k) sits at slot k + w - i.
                let lik_slot = off + (k + w - i);
                let l = tail[lik_slot] / pivot;
                if l == 0.0 {
                    continue;
                }
                tail[lik_slot] = l;
                // Row i, columns k+1..=last start at slot k + 1 + w - i.
                let base = off + (k + 1 + w - i);
                let dst = &mut tail[base..base + (last - k)];
                for (d, p) in dst.iter_mut().zip(&prow[1..]) {
                    *d -= l * p;
                }
            }
        }
        Ok(Self { n, w, data })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.w);
        let stride = 2 * w + 1;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let mut s = y[i];
            for c in lo..i {
                s -= self.data[i * stride + (c + w - i)] * y[c];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let mut s = y[i];
            for c in i + 1..=hi {
                s -= self.data[i * stride + (c + w - i)] * y[c];
            }
            y[i] = s / self.data[i * stride + w];
        }
        y
    }

    fn release(&mut self) {
        self.data = Vec::new();
    }
}

/// Dense solve for small systems (milestone-sized).
pub fn dense_solve(a: nalgebra::DMatrix<f64>, b: nalgebra::DVector<f64>) -> Result<nalgebra::DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::Singular("dense system is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("dense solve produced non-finite values".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn laplacian_1d(n: usize) -> SparseMatrix {
        let mut m = SparseMatrix::new(n);
        for i in 0..n {
            m.add(i, i, 2.0 + 0.1);
            if i > 0 {
                m.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                m.add(i, i + 1, -1.0);
            }
        }
        m
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let m = laplacian_1d(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = m.solve_banded(&b, 0).unwrap();
        let mut d = DMatrix::zeros(50, 50);
        for r in 0..50 {
            for &(c, v) in m.row(r) {
                d[(r, c)] = v;
            }
        }
        let xd = dense_solve(d, DVector::from_vec(b)).unwrap();
        for i in 0..50 {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut m = SparseMatrix::new(3);
        m.add(0, 0, 1.0);
        m.add(1, 1, 1.0);
        assert!(m.solve_banded(&[1.0, 1.0, 1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn banded_lu_solves_dominant_2d_stencils(
            nx in 3usize..9, ny in 2usize..7,
            seed in proptest::collection::vec(0.0f64..1.0, 64)
        ) {
            let n = nx * ny;
            let mut m = SparseMatrix::new(n);
            for j in 0..ny {
                for i in 0..nx {
                    let k = j * nx + i;
                    let mut diag = 0.05 + seed[k % 64];
                    let nbrs = [
                        (i > 0).then(|| k - 1),
                        (i + 1 < nx).then(|| k + 1),
                        (j > 0).then(|| k - nx),
                        (j + 1 < ny).then(|| k + nx),
                    ];
                    for (t, nb) in nbrs.iter().enumerate() {
                        if let Some(c) = nb {
                            let v = 0.2 + seed[(k + 7 * t) % 64];
                            m.add(k, *c, -v);
                            diag += v;
                        }
                    }
                    m.add(k, k, diag);
                }
            }
            let b: Vec<f64> = (0..n).map(|k| seed[(3 * k) % 64] - 0.5).collect();
            let x = m.solve_banded(&b, nx).unwrap();
            prop_assert!(m.relative_residual(&x, &b) < 1e-12);
        }
    }
}
