//! Matrix exponentials by scaling and squaring over a truncated Taylor
//! series, the low-rank factorized series, truncation-error bounds and the
//! trace identity for log-determinants.
//!
//! The full-matrix routine picks the smallest `s ≥ 0` with `‖W‖₁ / 2ˢ < ½`,
//! sums Taylor terms of `W / 2ˢ` until the running term has 1-norm `≤ eps`,
//! then squares the partial sum `s` times. The number of matrix products is
//! reported as `m = s + k − 1`, where `k` is the value of the term counter
//! when the loop exits.
//!
//! Gradients of the exponential differentiate exactly the series that was
//! evaluated: the same terms, the same squarings. [`SeriesTrace`] keeps what
//! the reverse pass needs.

use crate::array::{gemm_acc, norm1_slice, DenseArray};
use crate::error::{Error, Result};
use crate::rng::FlowRng;

/// Tolerance on the 1-norm of the last Taylor term.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Full `n × n` weight fed to the exponential. Any finite square matrix is
/// admissible: `e^W` is invertible for every `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareWeight(DenseArray);

impl SquareWeight {
    pub fn new(w: DenseArray) -> Result<Self> {
        w.require_square("SquareWeight")?;
        if !w.all_finite() {
            return Err(Error::NonFinite { op: "SquareWeight" });
        }
        Ok(Self(w))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DenseArray::zeros(&[n, n]))
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn as_array(&self) -> &DenseArray {
        &self.0
    }

    pub fn into_array(self) -> DenseArray {
        self.0
    }
}

/// Factor pair `A1 (n × t)`, `A2 (t × n)` with implied `W = A1·A2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankWeight {
    a1: DenseArray,
    a2: DenseArray,
}

impl LowRankWeight {
    pub fn new(a1: DenseArray, a2: DenseArray) -> Result<Self> {
        let ok = a1.rank() == 2
            && a2.rank() == 2
            && a1.shape()[1] == a2.shape()[0]
            && a1.shape()[0] == a2.shape()[1]
            && a1.shape()[1] <= a1.shape()[0];
        if !ok {
            return Err(Error::shape("LowRankWeight", a1.shape(), a2.shape()));
        }
        Ok(Self { a1, a2 })
    }

    pub fn dim(&self) -> usize {
        self.a1.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a1.shape()[1]
    }

    pub fn a1(&self) -> &DenseArray {
        &self.a1
    }

    pub fn a2(&self) -> &DenseArray {
        &self.a2
    }

    /// `V = A2·A1`, the `t × t` matrix whose series drives the expansion.
    pub fn inner(&self) -> DenseArray {
        self.a2.matmul(&self.a1).expect("factor shapes checked at construction")
    }

    pub fn product(&self) -> DenseArray {
        self.a1.matmul(&self.a2).expect("factor shapes checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpmReport {
    pub result: DenseArray,
    /// Number of squarings.
    pub s: u32,
    /// Term counter at loop exit (at least 2).
    pub k: u32,
    /// Cost coefficient `s + k − 1`.
    pub m: u32,
}

/// Which series is being summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    /// `Σ Wⁱ/i!` with scaling and squaring.
    Exp,
    /// `Σ Vⁱ/(i+1)!` without scaling, as used by the low-rank expansion.
    LowRank,
}

impl SeriesKind {
    /// Divisor of the first term and the initial value of the term counter.
    fn start(self) -> (f64, u32) {
        match self {
            SeriesKind::Exp => (1.0, 2),
            SeriesKind::LowRank => (2.0, 3),
        }
    }
}

/// Everything the reverse pass needs from one series evaluation.
#[derive(Debug, Clone)]
pub struct SeriesTrace {
    n: usize,
    kind: SeriesKind,
    s: u32,
    /// The scaled input `W / 2ˢ`.
    scaled: Vec<f64>,
    /// Terms that were added to the sum, first to last.
    terms: Vec<Vec<f64>>,
    /// Operands of each squaring, first to last.
    squares: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesStats {
    pub s: u32,
    pub k: u32,
}

impl SeriesStats {
    pub fn m(&self) -> u32 {
        self.s + self.k - 1
    }
}

/// Smallest non-negative `s` with `norm / 2ˢ < ½`.
pub fn squaring_count(norm: f64) -> u32 {
    let mut s = 0;
    while norm / 2f64.powi(s as i32) >= 0.5 {
        s += 1;
    }
    s
}

/// Evaluates one series over a row-major `n × n` slice. Returns the sum (or,
/// for [`SeriesKind::Exp`], the squared sum), the loop statistics and, when
/// `keep` is set, the trace for the reverse pass.
pub(crate) fn series_forward(
    w: &[f64],
    n: usize,
    eps: f64,
    kind: SeriesKind,
    keep: bool,
) -> Result<(Vec<f64>, SeriesStats, Option<SeriesTrace>)> {
    let norm = norm1_slice(w, n, n);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "matexp" });
    }
    let s = match kind {
        SeriesKind::Exp => squaring_count(norm),
        SeriesKind::LowRank => 0,
    };
    let inv_scale = 0.5f64.powi(s as i32);
    let scaled: Vec<f64> = w.iter().map(|v| v * inv_scale).collect();

    let (first_div, mut k) = kind.start();
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        x[i * n + i] = 1.0;
    }
    let mut y: Vec<f64> = scaled.iter().map(|v| v / first_div).collect();
    let mut terms = Vec::new();
    loop {
        let ny = norm1_slice(&y, n, n);
        if !ny.is_finite() {
            return Err(Error::NonFinite { op: "matexp" });
        }
        if ny <= eps {
            break;
        }
        for (a, b) in x.iter_mut().zip(&y) {
            *a += b;
        }
        let mut next = vec![0.0; n * n];
        gemm_acc(&scaled, &y, &mut next, n, n, n);
        let kf = f64::from(k);
        next.iter_mut().for_each(|v| *v /= kf);
        if keep {
            terms.push(std::mem::replace(&mut y, next));
        } else {
            y = next;
        }
        k += 1;
    }

    let mut squares = Vec::new();
    for _ in 0..s {
        let mut next = vec![0.0; n * n];
        gemm_acc(&x, &x, &mut next, n, n, n);
        if keep {
            squares.push(std::mem::replace(&mut x, next));
        } else {
            x = next;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "matexp" });
    }
    let stats = SeriesStats { s, k };
    let trace = keep.then_some(SeriesTrace {
        n,
        kind,
        s,
        scaled,
        terms,
        squares,
    });
    Ok((x, stats, trace))
}

/// Reverse pass of [`series_forward`]: maps the gradient of the output to
/// the gradient of the input matrix.
pub(crate) fn series_backward(trace: &SeriesTrace, grad: &[f64]) -> Vec<f64> {
    let n = trace.n;
    let mut g = grad.to_vec();
    for p in trace.squares.iter().rev() {
        // out = P·P  ⇒  dP = G·Pᵀ + Pᵀ·G
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += g[i * n + l] * p[j * n + l] + p[l * n + i] * g[l * n + j];
                }
                next[i * n + j] = acc;
            }
        }
        g = next;
    }

    let (first_div, k0) = trace.kind.start();
    let mut d_scaled = vec![0.0; n * n];
    let terms = &trace.terms;
    if !terms.is_empty() {
        // Every added term receives the sum's gradient; term j+1 = W·term j / k_j
        // also feeds back into term j and into W.
        let mut d_term = g.clone();
        for j in (1..terms.len()).rev() {
            let kf = f64::from(k0 + j as u32 - 1);
            let prev = &terms[j - 1];
            let mut d_prev = g.clone();
            for r in 0..n {
                for c in 0..n {
                    let mut acc_w = 0.0;
                    let mut acc_p = 0.0;
                    for l in 0..n {
                        acc_w += d_term[r * n + l] * prev[c * n + l];
                        acc_p += trace.scaled[l * n + r] * d_term[l * n + c];
                    }
                    d_scaled[r * n + c] += acc_w / kf;
                    d_prev[r * n + c] += acc_p / kf;
                }
            }
            d_term = d_prev;
        }
        for (d, t) in d_scaled.iter_mut().zip(&d_term) {
            *d += t / first_div;
        }
    }
    let inv_scale = 0.5f64.powi(trace.s as i32);
    d_scaled.iter_mut().for_each(|v| *v *= inv_scale);
    d_scaled
}

/// Matrix exponential by scaling and squaring.
pub fn matexp(w: &SquareWeight, eps: f64) -> Result<ExpmReport> {
    check_eps(eps)?;
    let n = w.dim();
    let (x, stats, _) = series_forward(w.as_array().data(), n, eps, SeriesKind::Exp, false)?;
    Ok(ExpmReport {
        result: DenseArray::new(&[n, n], x)?,
        s: stats.s,
        k: stats.k,
        m: stats.m(),
    })
}

/// Convenience wrapper returning only the exponential of a plain matrix.
pub fn expm(w: &DenseArray, eps: f64) -> Result<DenseArray> {
    Ok(matexp(&SquareWeight::new(w.clone())?, eps)?.result)
}

/// The inner low-rank series `Σ_{i≥0} Vⁱ/(i+1)!`, truncated like the full
/// routine but with no scaling, first term `V/2!` and counter start 3.
pub fn lowrank_series(v: &DenseArray, eps: f64) -> Result<(DenseArray, SeriesStats)> {
    check_eps(eps)?;
    let t = v.require_square("lowrank_series")?;
    let (x, stats, _) = series_forward(v.data(), t, eps, SeriesKind::LowRank, false)?;
    Ok((DenseArray::new(&[t, t], x)?, stats))
}

/// `e^{A1·A2} = I + A1 · (Σ Vⁱ/(i+1)!) · A2` with `V = A2·A1`. The inner
/// series costs `O(t³)`.
pub fn matexp_lowrank(w: &LowRankWeight, eps: f64) -> Result<DenseArray> {
    let (series, _) = lowrank_series(&w.inner(), eps)?;
    let mid = w.a1().matmul(&series)?.matmul(w.a2())?;
    DenseArray::identity(w.dim()).add(&mid)
}

/// Upper bound on the 1-norm error of truncating the series after index `k`.
///
/// Full form: `(‖W‖^{k+1}/(k+1)!) / (1 − ‖W‖/(k+2))`, valid for
/// `‖W‖ < k + 2`. Low-rank form (tail of `Σ Vⁱ/(i+1)!`):
/// `(‖V‖^{k+1}/(k+2)!) / (1 − ‖V‖/(k+3))`, valid for `‖V‖ < k + 3`.
pub fn truncation_bound(norm1: f64, k: usize, lowrank: bool) -> Result<f64> {
    if !(norm1 >= 0.0) || !norm1.is_finite() {
        return Err(Error::invalid(
            "truncation_bound",
            format!("norm must be finite and non-negative, got {norm1}"),
        ));
    }
    let (fact_top, denom_k) = if lowrank { (k + 2, k + 3) } else { (k + 1, k + 2) };
    let denom = 1.0 - norm1 / denom_k as f64;
    if denom <= 0.0 {
        return Err(Error::OutsideValidity { norm: norm1, k });
    }
    // norm^{k+1} / fact_top!, accumulated as a product to stay in range.
    let mut lead = 1.0;
    for i in 1..=fact_top {
        lead /= i as f64;
        if i <= k + 1 {
            lead *= norm1;
        }
    }
    Ok(lead / denom)
}

/// Plain partial sum `T_k(W) = Σ_{i=0..k} Wⁱ/i!` with no scaling.
pub fn taylor_partial_sum(w: &DenseArray, k: usize) -> Result<DenseArray> {
    partial_sum(w, k, 0)
}

/// Plain partial sum `Σ_{i=0..k} Vⁱ/(i+1)!`.
pub fn lowrank_partial_sum(v: &DenseArray, k: usize) -> Result<DenseArray> {
    partial_sum(v, k, 1)
}

fn partial_sum(w: &DenseArray, k: usize, shift: usize) -> Result<DenseArray> {
    let n = w.require_square("partial_sum")?;
    let mut term = DenseArray::identity(n).scale(1.0 / (1..=shift).product::<usize>() as f64);
    let mut sum = term.clone();
    for i in 1..=k {
        term = w.matmul(&term)?.scale(1.0 / (i + shift) as f64);
        sum.add_assign(&term)?;
    }
    Ok(sum)
}

/// `log det e^W = Tr(W)`.
pub fn logdet_trace(w: &SquareWeight) -> f64 {
    w.as_array().trace().expect("SquareWeight is square")
}

/// `scale · (B − Bᵀ)/2` with `B` standard normal. The result is exactly
/// skew-symmetric, so its exponential is a rotation.
pub fn skew_symmetric_init(n: usize, rng: &mut FlowRng, scale: f64) -> SquareWeight {
    assert!(n >= 1, "skew_symmetric_init needs n ≥ 1");
    let b = rng.normals(n * n);
    let mut w = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = scale * (b[i * n + j] - b[j * n + i]) / 2.0;
            w.data_mut()[i * n + j] = v;
            w.data_mut()[j * n + i] = -v;
        }
    }
    SquareWeight(w)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            "matexp",
            format!("tolerance must be positive, got {eps}"),
        ))
    }
}
