//! Dense LU factorization for the small square matrices of the 1×1
//! convolutions. Always computed in `f64`.

use crate::error::{Error, Result};

/// Row-major `n×n` LU factors with partial pivoting.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

/// Matrices with `|det|` at or below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Lu> {
        if a.len() != n * n {
            return Err(Error::shape(format!("LU of {} elements as {n}x{n}", a.len())));
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (pivot, max) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if max == 0.0 {
                return Err(Error::Singular { det: 0.0 });
            }
            if pivot != k {
                for c in 0..n {
                    lu.swap(k * n + c, pivot * n + c);
                }
                perm.swap(k, pivot);
                sign = -sign;
            }
            let d = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / d;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().enumerate().for_each(|(i, v)| *v = if i == j { 1.0 } else { 0.0 });
            self.solve(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// `log|det A|`, rejecting matrices whose determinant magnitude is at most
/// [`SINGULAR_DET`].
pub fn log_abs_det_checked(a: &[f64], n: usize) -> Result<f64> {
    let lu = Lu::factor(a, n)?;
    let lad = lu.log_abs_det();
    if lad <= SINGULAR_DET.ln() {
        return Err(Error::Singular { det: lad.exp() });
    }
    Ok(lad)
}

pub fn inverse_checked(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let lu = Lu::factor(a, n)?;
    if lu.log_abs_det() <= SINGULAR_DET.ln() {
        return Err(Error::Singular { det: lu.det() });
    }
    Ok(lu.inverse())
}
