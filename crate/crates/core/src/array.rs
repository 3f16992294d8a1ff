//! Dense row-major `f64` arrays of rank 1 to 4.
//!
//! Images use the height × width × channels layout; batches add a leading
//! extent, so a batch of images is `[n, h, w, c]`. Everything in this module
//! is a plain value computation; the differentiable wrappers live in
//! [`crate::autodiff`].

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::invalid(
                "DenseArray::new",
                format!("rank {} outside 1..={MAX_RANK}", shape.len()),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(
                "DenseArray::new",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= MAX_RANK, "rank out of range");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("DenseArray::from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    /// `b` stacked copies of the `n × n` identity, shape `[b, n, n]`.
    pub fn identity_stack(b: usize, n: usize) -> Self {
        let mut out = Self::zeros(&[b, n, n]);
        for m in 0..b {
            for i in 0..n {
                out.data[m * n * n + i * n + i] = 1.0;
            }
        }
        out
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut out = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            out.data[i * n + i] = *v;
        }
        out
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            debug_assert!(i < e);
            acc * e + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rank() == 2 && self.shape[0] == self.shape[1]
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn require_square(&self, op: &'static str) -> Result<usize> {
        let (r, c) = self.require_matrix(op)?;
        if r != c {
            return Err(Error::invalid(op, format!("expected a square matrix, got {r}×{c}")));
        }
        Ok(r)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, m) = self.require_matrix("matmul")?;
        let (m2, p) = other.require_matrix("matmul")?;
        if m != m2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * p];
        gemm_acc(&self.data, &other.data, &mut out, n, m, p);
        Self::new(&[n, p], out)
    }

    /// Batched product `[b, n, m] × [b, m, p] → [b, n, p]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        if self.rank() != 3 || other.rank() != 3 || self.shape[0] != other.shape[0] || self.shape[2] != other.shape[1] {
            return Err(Error::shape("bmm", &self.shape, &other.shape));
        }
        let (b, n, m, p) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let mut out = vec![0.0; b * n * p];
        for k in 0..b {
            gemm_acc(
                &self.data[k * n * m..(k + 1) * n * m],
                &other.data[k * m * p..(k + 1) * m * p],
                &mut out[k * n * p..(k + 1) * n * p],
                n,
                m,
                p,
            );
        }
        Self::new(&[b, n, p], out)
    }

    /// Transposes the last two extents of a rank-3 array.
    pub fn batch_transpose(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::invalid(
                "batch_transpose",
                format!("expected rank 3, got {:?}", self.shape),
            ));
        }
        let (b, r, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Self::zeros(&[b, c, r]);
        for k in 0..b {
            let src = &self.data[k * r * c..];
            let dst = &mut out.data[k * r * c..];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        Ok(out)
    }

    /// Matrix 1-norm: maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let (r, c) = self.require_matrix("norm1").expect("norm1 needs a matrix");
        norm1_slice(&self.data, r, c)
    }

    pub fn trace(&self) -> Result<f64> {
        let n = self.require_square("trace")?;
        Ok((0..n).map(|i| self.data[i * n + i]).sum())
    }

    /// Sums over `axes`, dropping them from the shape. Reducing every axis
    /// yields shape `[1]`.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        self.reduce_axes(axes, "sum", 0.0, |acc, v| acc + v)
    }

    pub fn max_axes(&self, axes: &[usize]) -> Result<Self> {
        self.reduce_axes(axes, "max", f64::NEG_INFINITY, f64::max)
    }

    fn reduce_axes(&self, axes: &[usize], op: &'static str, init: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let plan = ReducePlan::new(&self.shape, axes, op)?;
        let mut out = vec![init; plan.out_len()];
        for (i, v) in self.data.iter().enumerate() {
            let o = plan.out_index(i);
            out[o] = f(out[o], *v);
        }
        Self::new(&plan.out_shape, out)
    }

    /// Slices `[start, start + len)` along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let c = *self.shape.last().unwrap();
        if start + len > c || len == 0 {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{} outside extent {c}", start + len),
            ));
        }
        let outer = self.len() / c;
        let mut data = Vec::with_capacity(outer * len);
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * c + start..o * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Self::new(&shape, data)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&self, other: &Self) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra != rb || self.shape[..ra - 1] != other.shape[..rb - 1] {
            return Err(Error::shape("concat_last", &self.shape, &other.shape));
        }
        let (ca, cb) = (self.shape[ra - 1], other.shape[rb - 1]);
        let outer = self.len() / ca;
        let mut data = Vec::with_capacity(self.len() + other.len());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&other.data[o * cb..(o + 1) * cb]);
        }
        let mut shape = self.shape.clone();
        shape[ra - 1] = ca + cb;
        Self::new(&shape, data)
    }

    /// Selects entries of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let stride = self.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    /// Row `i` of the leading axis, keeping the remaining extents (or `[1]`
    /// for rank-1 arrays).
    pub fn row(&self, i: usize) -> Self {
        let stride = self.len() / self.shape[0];
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Self {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "nothing to stack"))?;
        if first.rank() >= MAX_RANK {
            return Err(Error::invalid("stack", "result would exceed the maximum rank"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for it in items {
            if it.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &it.shape));
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}

/// `out += a · b` for row-major `a: n×m`, `b: m×p`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let av = a[i * m + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn norm1_slice(data: &[f64], r: usize, c: usize) -> f64 {
    (0..c)
        .map(|j| (0..r).map(|i| data[i * c + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Index bookkeeping for axis reductions.
pub(crate) struct ReducePlan {
    in_shape: Vec<usize>,
    reduced: Vec<bool>,
    pub out_shape: Vec<usize>,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize], op: &'static str) -> Result<Self> {
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(op, format!("axis {a} invalid for shape {shape:?}")));
            }
            if reduced[a] {
                return Err(Error::invalid(op, format!("axis {a} repeated")));
            }
            reduced[a] = true;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Self {
            in_shape: shape.to_vec(),
            reduced,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Maps a flat input index to its flat output index.
    pub fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        let mut mult = 1;
        for ax in (0..self.in_shape.len()).rev() {
            let e = self.in_shape[ax];
            let i = flat % e;
            flat /= e;
            if !self.reduced[ax] {
                out += i * mult;
                mult *= e;
            }
        }
        out
    }
}

/// Zero-padded "same" cross-correlation.
///
/// `x` is `[h, w, cin]` or `[n, h, w, cin]`; `kernel` is `[kh, kw, cin, cout]`
/// with odd `kh`, `kw`. Returns the same spatial extents with `cout` channels.
pub fn conv2d_same(x: &DenseArray, kernel: &DenseArray) -> Result<DenseArray> {
    let g = ConvGeom::new(x, kernel)?;
    let mut out = vec![0.0; g.n * g.h * g.w * g.cout];
    let (xd, kd) = (x.data(), kernel.data());
    for b in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let o_off = ((b * g.h + i) * g.w + j) * g.cout;
                let orow = &mut out[o_off..o_off + g.cout];
                for di in 0..g.kh {
                    let Some(ii) = (i + di).checked_sub(g.ph).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for dj in 0..g.kw {
                        let Some(jj) = (j + dj).checked_sub(g.pw).filter(|&v| v < g.w) else {
                            continue;
                        };
                        let x_off = ((b * g.h + ii) * g.w + jj) * g.cin;
                        let k_off = (di * g.kw + dj) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = xd[x_off + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kd[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                            for (o, kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    DenseArray::new(&g.out_shape(x), out)
}

/// Returns `(grad_x, grad_kernel)` for [`conv2d_same`] given the output
/// gradient.
pub fn conv2d_same_vjp(x: &DenseArray, kernel: &DenseArray, grad: &DenseArray) -> Result<(DenseArray, DenseArray)> {
    let g = ConvGeom::new(x, kernel)?;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for b in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let o_off = ((b * g.h + i) * g.w + j) * g.cout;
                let grow = &gd[o_off..o_off + g.cout];
                for di in 0..g.kh {
                    let Some(ii) = (i + di).checked_sub(g.ph).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for dj in 0..g.kw {
                        let Some(jj) = (j + dj).checked_sub(g.pw).filter(|&v| v < g.w) else {
                            continue;
                        };
                        let x_off = ((b * g.h + ii) * g.w + jj) * g.cin;
                        let k_off = (di * g.kw + dj) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let krow = &kd[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                            let mut acc = 0.0;
                            for (kv, gv) in krow.iter().zip(grow) {
                                acc += kv * gv;
                            }
                            gx[x_off + ci] += acc;
                            let xv = xd[x_off + ci];
                            let gkrow = &mut gk[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                            for (o, gv) in gkrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((DenseArray::new(x.shape(), gx)?, DenseArray::new(kernel.shape(), gk)?))
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn new(x: &DenseArray, k: &DenseArray) -> Result<Self> {
        let (n, h, w, cin) = match *x.shape() {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("input must be rank 3 or 4, got {:?}", x.shape()),
                ))
            }
        };
        let [kh, kw, kcin, cout] = *k.shape() else {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be rank 4, got {:?}", k.shape()),
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel extents {kh}×{kw} must be odd"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ph: kh / 2,
            pw: kw / 2,
        })
    }

    fn out_shape(&self, x: &DenseArray) -> Vec<usize> {
        let mut s = x.shape().to_vec();
        *s.last_mut().unwrap() = self.cout;
        s
    }
}
