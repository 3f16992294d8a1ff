//! Invertible layers. Activations are `[n, h, w, c]`; 2-D points travel as
//! `[n, 1, 1, 2]`.

mod actnorm;
mod conv1x1;
mod coupling;
mod shape;
mod stabilizer;

use std::fmt;
use std::str::FromStr;

pub use actnorm::Actnorm;
pub use conv1x1::Conv1x1;
pub use coupling::{Coupling, CouplingForm};
pub use shape::{split, squeeze, squeeze_shape, unsplit, unsqueeze, Squeeze};
pub use stabilizer::Stabilizer;

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

pub trait FlowLayer {
    fn name(&self) -> &str;

    /// Returns `y` and the per-sample log-determinant `[n]`.
    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;

    fn inverse(&self, params: &ParamStore, y: &DenseArray) -> Result<DenseArray>;

    /// Data-dependent initialization from a batch of inputs to this layer.
    fn data_init(&self, _params: &mut ParamStore, _x: &DenseArray) -> Result<()> {
        Ok(())
    }

    /// Forward pass on plain arrays without recording gradients.
    fn forward_array(&self, params: &ParamStore, x: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        let (y, ld) = self.forward(&ctx, tape.constant(x.clone()))?;
        Ok(((*y.value()).clone(), (*ld.value()).clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Matexp,
    Standard,
    Plu,
}

impl FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matexp" => Ok(Self::Matexp),
            "standard" => Ok(Self::Standard),
            "plu" => Ok(Self::Plu),
            _ => Err(Error::Config(format!(
                "unknown conv `{s}` (expected matexp, standard or plu)"
            ))),
        }
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Matexp => "matexp",
            Self::Standard => "standard",
            Self::Plu => "plu",
        })
    }
}

/// Any layer of a flow step.
pub enum Layer {
    Actnorm(Actnorm),
    Conv1x1(Conv1x1),
    Coupling(Coupling),
    Squeeze(Squeeze),
}

impl Layer {
    fn inner(&self) -> &dyn FlowLayer {
        match self {
            Self::Actnorm(l) => l,
            Self::Conv1x1(l) => l,
            Self::Coupling(l) => l,
            Self::Squeeze(l) => l,
        }
    }
}

impl FlowLayer for Layer {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.inner().forward(ctx, x)
    }

    fn inverse(&self, params: &ParamStore, y: &DenseArray) -> Result<DenseArray> {
        self.inner().inverse(params, y)
    }

    fn data_init(&self, params: &mut ParamStore, x: &DenseArray) -> Result<()> {
        self.inner().data_init(params, x)
    }
}

/// `[n, h, w, c]` extents of an activation.
pub(crate) fn nhwc(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::invalid(op, format!("expected [n, h, w, c], got {shape:?}"))),
    }
}

pub(crate) fn check_channels(op: &'static str, shape: &[usize], expect: &[usize; 3]) -> Result<[usize; 4]> {
    let s = nhwc(op, shape)?;
    if s[1..] != expect[..] {
        return Err(Error::shape(op, expect, &s[1..]));
    }
    Ok(s)
}

/// Repeats a one-element log-determinant for each of `n` samples.
pub(crate) fn per_sample<'t>(tape: &'t Tape, ld: Var<'t>, n: usize) -> Result<Var<'t>> {
    tape.constant(DenseArray::ones(&[n])).mul(ld)
}
