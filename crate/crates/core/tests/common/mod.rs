//! Reference computations kept independent of the library's own kernels.
#![allow(dead_code)]

use mexflow::conditioner::ConditionerConfig;
use mexflow::layers::{Coupling, CouplingForm};
use mexflow::params::ParamStore;
use mexflow::rng::FlowRng;
use mexflow::DenseArray;

/// `log |det A|` by Gaussian elimination with partial pivoting, `a` row-major.
pub fn logabsdet(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let mut p = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[p * n + col].abs() {
                p = r;
            }
        }
        if p != col {
            for c in 0..n {
                m.swap(p * n + c, col * n + c);
            }
        }
        let piv = m[col * n + col];
        acc += piv.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / piv;
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
        }
    }
    acc
}

/// Determinant (with sign) by the same elimination.
pub fn det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut d = 1.0;
    for col in 0..n {
        let mut p = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[p * n + col].abs() {
                p = r;
            }
        }
        if p != col {
            for c in 0..n {
                m.swap(p * n + c, col * n + c);
            }
            d = -d;
        }
        let piv = m[col * n + col];
        d *= piv;
        for r in col + 1..n {
            let f = m[r * n + col] / piv;
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
        }
    }
    d
}

/// Triple-loop product of row-major `a: n×m` and `b: m×p`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..m {
                s += a[i * m + k] * b[k * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^W` by scaling to `‖W‖₁/2ˢ < 1/16`, summing the Taylor series until
/// terms fall below `1e-15` relative, and squaring back.
pub fn expm_oracle(w: &[f64], n: usize) -> Vec<f64> {
    let mut s = 0;
    while norm1(w, n) / 2f64.powi(s) >= 1.0 / 16.0 {
        s += 1;
    }
    let ws: Vec<f64> = w.iter().map(|v| v / 2f64.powi(s)).collect();
    let mut sum = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        sum[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..60 {
        term = matmul(&ws, &term, n, n, n).into_iter().map(|v| v / k as f64).collect();
        for (a, t) in sum.iter_mut().zip(&term) {
            *a += t;
        }
        if norm1(&term, n) < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum, n, n, n);
    }
    sum
}

/// Central-difference Jacobian of `f` at `x`, row-major `[out, in]`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let n_in = x.len();
    let n_out = f(x).len();
    let mut jac = vec![0.0; n_out * n_in];
    let mut xp = x.to_vec();
    for j in 0..n_in {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..n_out {
            jac[i * n_in + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn random_array(rng: &mut FlowRng, shape: &[usize], scale: f64) -> DenseArray {
    let len = shape.iter().product();
    DenseArray::new(shape, rng.normals(len).into_iter().map(|v| v * scale).collect()).unwrap()
}

/// Adds `N(0, scale²)` noise to every trainable parameter.
pub fn perturb(store: &mut ParamStore, rng: &mut FlowRng, scale: f64) {
    for id in store.trainable_ids() {
        let noise = random_array(rng, store.get(id).shape(), scale);
        store.get_mut(id).add_assign(&noise).unwrap();
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖Σ_{i>k} Wⁱ/(i+shift)!‖₁` summed term by term, so no cancellation
/// against the partial sum limits the precision.
pub fn tail_norm(w: &[f64], n: usize, k: usize, shift: usize) -> f64 {
    let mut term: Vec<f64> = DenseArray::identity(n).data().to_vec();
    let mut tail = vec![0.0; n * n];
    for i in 1..k + 60 {
        term = matmul(w, &term, n, n, n)
            .into_iter()
            .map(|v| v / (i + shift) as f64)
            .collect();
        if i > k {
            tail.iter_mut().zip(&term).for_each(|(a, t)| *a += t);
        }
    }
    let first = 1.0 / (1..=shift).product::<usize>() as f64;
    DenseArray::new(&[n, n], tail).unwrap().scale(first).norm1()
}

/// An affine coupling and a location coupling on `[2, 2, 6]` whose head
/// feeds only the diagonal of `S` from the affine head's weights, plus an
/// input batch. The two must agree.
pub fn diagonal_pair(net: &ConditionerConfig, seed: u64) -> (Coupling, ParamStore, Coupling, ParamStore, DenseArray) {
    let shape = [2, 2, 6];
    let c2 = 3;
    let build = |form| {
        let mut store = ParamStore::new();
        let c = Coupling::new(&mut store, "cp", shape, form, net, 1.0, 1e-14, &mut FlowRng::seed(seed)).unwrap();
        (c, store)
    };
    let (aff, mut pa) = build(CouplingForm::Affine);
    let (loc, mut pl) = build(CouplingForm::Location);
    let mut rng = FlowRng::seed(seed + 1);
    let wa = random_array(&mut rng, pa.get(pa.id_of("cp.net.head.w").unwrap()).shape(), 0.2);
    let ba = random_array(&mut rng, &[2 * c2], 0.2);
    let wl_id = pl.id_of("cp.net.head.w").unwrap();
    let bl_id = pl.id_of("cp.net.head.b").unwrap();
    let [kh, kw, hid, _] = *pl.get(wl_id).shape() else {
        panic!()
    };
    let out_l = c2 * c2 + c2;
    let mut wl = DenseArray::zeros(&[kh, kw, hid, out_l]);
    let mut bl = DenseArray::zeros(&[out_l]);
    let map = |j: usize| if j < c2 { j * c2 + j } else { c2 * c2 + (j - c2) };
    for k in 0..kh * kw * hid {
        for j in 0..2 * c2 {
            wl.data_mut()[k * out_l + map(j)] = wa.data()[k * 2 * c2 + j];
        }
    }
    for j in 0..2 * c2 {
        bl.data_mut()[map(j)] = ba.data()[j];
    }
    pa.set(pa.id_of("cp.net.head.w").unwrap(), wa).unwrap();
    pa.set(pa.id_of("cp.net.head.b").unwrap(), ba).unwrap();
    pl.set(wl_id, wl).unwrap();
    pl.set(bl_id, bl).unwrap();
    for name in ["cp.stab.u1", "cp.stab.u2"] {
        let u = DenseArray::scalar(0.7);
        pa.set(pa.id_of(name).unwrap(), u.clone()).unwrap();
        pl.set(pl.id_of(name).unwrap(), u).unwrap();
    }
    let x = random_array(&mut rng, &[3, 2, 2, 6], 1.0);
    (aff, pa, loc, pl, x)
}
