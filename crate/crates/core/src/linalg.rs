//! LU decomposition with partial pivoting for small dense matrices.

use crate::array::DenseArray;
use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the largest pivot, or a 1-norm
/// condition estimate above its inverse, count as singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// `P·A = L·U` with unit-diagonal `L` stored below the diagonal of `lu` and
/// `U` on and above it. `perm[i]` is the row of `A` that ended up in row `i`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    a_norm1: f64,
}

impl Lu {
    pub fn factor(a: &DenseArray) -> Result<Self> {
        let n = a.require_square("lu")?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let p = (col..n)
                .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
                .unwrap();
            if p != col {
                for c in 0..n {
                    lu.swap(p * n + c, col * n + c);
                }
                perm.swap(p, col);
                sign = -sign;
            }
            let pivot = lu[col * n + col];
            if pivot == 0.0 {
                continue;
            }
            for r in (col + 1)..n {
                let f = lu[r * n + col] / pivot;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for c in (col + 1)..n {
                        lu[r * n + c] -= f * lu[col * n + c];
                    }
                }
            }
        }
        Ok(Self {
            n,
            lu,
            perm,
            sign,
            a_norm1: a.norm1(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn pivots(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.lu[i * self.n + i]).collect()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn lower(&self) -> DenseArray {
        let n = self.n;
        let mut l = DenseArray::identity(n);
        for i in 0..n {
            for j in 0..i {
                l.data_mut()[i * n + j] = self.lu[i * n + j];
            }
        }
        l
    }

    pub fn upper(&self) -> DenseArray {
        let n = self.n;
        let mut u = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                u.data_mut()[i * n + j] = self.lu[i * n + j];
            }
        }
        u
    }

    pub fn log_abs_det(&self) -> f64 {
        self.pivots().iter().map(|p| p.abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * self.pivots().iter().product::<f64>()
    }

    /// Sign of the determinant (`0` when singular).
    pub fn det_sign(&self) -> f64 {
        let piv = self.pivots();
        if piv.contains(&0.0) {
            0.0
        } else {
            self.sign * piv.iter().map(|p| p.signum()).product::<f64>()
        }
    }

    fn singular(&self) -> bool {
        let piv = self.pivots();
        let max = piv.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        max == 0.0 || piv.iter().any(|p| p.abs() <= SINGULAR_RTOL * max || !p.is_finite())
    }

    /// 1-norm condition number `‖A‖₁·‖A⁻¹‖₁`; infinite when singular.
    pub fn condition(&self) -> f64 {
        if self.singular() {
            return f64::INFINITY;
        }
        match self.inverse_unchecked() {
            Ok(inv) => self.a_norm1 * inv.norm1(),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn check_invertible(&self, what: &str) -> Result<()> {
        let cond = self.condition();
        if !cond.is_finite() || cond > 1.0 / SINGULAR_RTOL {
            return Err(Error::Singular {
                what: what.to_string(),
                condition: cond,
            });
        }
        Ok(())
    }

    /// Solves `A·x = b` for each column of `b` (`n × p`) or a vector `[n]`.
    pub fn solve(&self, b: &DenseArray) -> Result<DenseArray> {
        if self.singular() {
            return Err(Error::Singular {
                what: "lu solve".into(),
                condition: f64::INFINITY,
            });
        }
        self.solve_unchecked(b)
    }

    fn solve_unchecked(&self, b: &DenseArray) -> Result<DenseArray> {
        let n = self.n;
        let p = match *b.shape() {
            [m] if m == n => 1,
            [m, p] if m == n => p,
            _ => return Err(Error::shape("lu solve", &[n, n], b.shape())),
        };
        let mut x = vec![0.0; n * p];
        for i in 0..n {
            x[i * p..(i + 1) * p].copy_from_slice(&b.data()[self.perm[i] * p..(self.perm[i] + 1) * p]);
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                for c in 0..p {
                    x[i * p + c] -= f * x[k * p + c];
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = self.lu[i * n + k];
                for c in 0..p {
                    x[i * p + c] -= f * x[k * p + c];
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..p {
                x[i * p + c] /= d;
            }
        }
        DenseArray::new(b.shape(), x)
    }

    pub fn inverse(&self) -> Result<DenseArray> {
        self.solve(&DenseArray::identity(self.n))
    }

    fn inverse_unchecked(&self) -> Result<DenseArray> {
        self.solve_unchecked(&DenseArray::identity(self.n))
    }

    /// The permutation as a matrix `P` with `P·A = L·U`.
    pub fn permutation_matrix(&self) -> DenseArray {
        let n = self.n;
        let mut p = DenseArray::zeros(&[n, n]);
        for (i, &r) in self.perm.iter().enumerate() {
            p.data_mut()[i * n + r] = 1.0;
        }
        p
    }
}

/// Solves `L·x = b` for unit- or general lower-triangular `L` applied to the
/// columns of `b` (`[n]` or `[n, p]`).
pub fn solve_lower(l: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    triangular_solve(l, b, true)
}

pub fn solve_upper(u: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    triangular_solve(u, b, false)
}

fn triangular_solve(t: &DenseArray, b: &DenseArray, lower: bool) -> Result<DenseArray> {
    let n = t.require_square("triangular_solve")?;
    let p = match *b.shape() {
        [m] if m == n => 1,
        [m, p] if m == n => p,
        _ => return Err(Error::shape("triangular_solve", t.shape(), b.shape())),
    };
    let td = t.data();
    let mut x = b.data().to_vec();
    let order: Box<dyn Iterator<Item = usize>> = if lower { Box::new(0..n) } else { Box::new((0..n).rev()) };
    for i in order {
        let range = if lower { 0..i } else { (i + 1)..n };
        for k in range {
            let f = td[i * n + k];
            for c in 0..p {
                x[i * p + c] -= f * x[k * p + c];
            }
        }
        let d = td[i * n + i];
        if d == 0.0 {
            return Err(Error::Singular {
                what: "triangular solve".into(),
                condition: f64::INFINITY,
            });
        }
        for c in 0..p {
            x[i * p + c] /= d;
        }
    }
    DenseArray::new(b.shape(), x)
}
