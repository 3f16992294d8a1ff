use std::rc::Rc;

use super::{check_channels, nhwc, FlowLayer};
use crate::array::DenseArray;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

/// Extents after squeezing `[h, w, c]`.
pub fn squeeze_shape(shape: [usize; 3]) -> Result<[usize; 3]> {
    let [h, w, c] = shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "squeeze",
            format!("spatial extents {h}×{w} must be even"),
        ));
    }
    Ok([h / 2, w / 2, 4 * c])
}

/// For each output element of a squeeze of `[n, h, w, c]`, the flat input
/// index it reads. Output channel `(di·2 + dj)·c + ch` holds the block
/// position `(di, dj)`: top-left, top-right, bottom-left, bottom-right.
fn squeeze_index(n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for i in 0..h2 {
            for j in 0..w2 {
                for di in 0..2 {
                    for dj in 0..2 {
                        for ch in 0..c {
                            idx.push(((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Moves each 2×2 spatial block into channels: `[n, h, w, c] → [n, h/2, w/2, 4c]`.
pub fn squeeze(x: &DenseArray) -> Result<DenseArray> {
    let [n, h, w, c] = nhwc("squeeze", x.shape())?;
    let [h2, w2, c4] = squeeze_shape([h, w, c])?;
    let data = squeeze_index(n, h, w, c).into_iter().map(|i| x.data()[i]).collect();
    DenseArray::new(&[n, h2, w2, c4], data)
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze(y: &DenseArray) -> Result<DenseArray> {
    let [n, h2, w2, c4] = nhwc("unsqueeze", y.shape())?;
    if c4 % 4 != 0 {
        return Err(Error::invalid(
            "unsqueeze",
            format!("channel count {c4} is not a multiple of 4"),
        ));
    }
    let (h, w, c) = (2 * h2, 2 * w2, c4 / 4);
    let mut x = vec![0.0; y.len()];
    for (o, i) in squeeze_index(n, h, w, c).into_iter().enumerate() {
        x[i] = y.data()[o];
    }
    DenseArray::new(&[n, h, w, c], x)
}

/// Splits channels into contiguous halves `(kept, factored)`.
pub fn split(x: &DenseArray) -> Result<(DenseArray, DenseArray)> {
    let c = *x.shape().last().unwrap();
    if !c.is_multiple_of(2) {
        return Err(Error::invalid("split", format!("channel count {c} is odd")));
    }
    Ok((x.slice_last(0, c / 2)?, x.slice_last(c / 2, c / 2)?))
}

pub fn unsplit(kept: &DenseArray, factored: &DenseArray) -> Result<DenseArray> {
    kept.concat_last(factored)
}

/// Squeeze as a flow layer; volume preserving.
#[derive(Debug, Clone)]
pub struct Squeeze {
    name: String,
    shape: [usize; 3],
}

impl Squeeze {
    pub fn new(name: &str, shape: [usize; 3]) -> Result<Self> {
        squeeze_shape(shape)?;
        Ok(Self {
            name: name.to_string(),
            shape,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        squeeze_shape(self.shape).expect("checked at construction")
    }
}

impl FlowLayer for Squeeze {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [n, h, w, c] = check_channels("squeeze", &x.shape(), &self.shape)?;
        let [h2, w2, c4] = self.output_shape();
        let y = x.gather(Rc::new(squeeze_index(n, h, w, c)), &[n, h2, w2, c4])?;
        Ok((y, ctx.tape().constant(DenseArray::zeros(&[n]))))
    }

    fn inverse(&self, _params: &ParamStore, y: &DenseArray) -> Result<DenseArray> {
        check_channels("unsqueeze", y.shape(), &self.output_shape())?;
        unsqueeze(y)
    }
}
