use std::fmt;

use super::{check_channels, FlowLayer, Stabilizer};
use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::conditioner::{Conditioner, ConditionerConfig, HeadShape};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::rng::FlowRng;

/// How the conditioner output acts on the second channel half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingForm {
    /// Elementwise scale and shift.
    Affine,
    /// One matrix over the whole flattened half per sample.
    Dense,
    /// One `c/2 × c/2` matrix per spatial site.
    Location,
    /// Per-site `S = A1·A2` with inner rank `rank`. With `stabilize_factors`
    /// the stabilizer acts on each factor and the exponential uses the
    /// low-rank series; otherwise it acts on the product.
    LowRank { rank: usize, stabilize_factors: bool },
}

impl fmt::Display for CouplingForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Affine => f.write_str("affine"),
            Self::Dense => f.write_str("dense"),
            Self::Location => f.write_str("location"),
            Self::LowRank { rank, .. } => write!(f, "lowrank(t={rank})"),
        }
    }
}

/// Transform of `x²` produced by the conditioner.
enum Site<'t> {
    /// Stabilized log-scales `[n, h, w, c/2]`.
    Diag(Var<'t>),
    /// Stabilized matrices `[b, m, m]`.
    Full(Var<'t>),
    /// Stabilized factors `[b, c/2, t]`, `[b, t, c/2]`.
    Factors(Var<'t>, Var<'t>),
}

#[derive(Debug, Clone)]
pub struct Coupling {
    name: String,
    shape: [usize; 3],
    form: CouplingForm,
    eps: f64,
    pub stabilizer: Stabilizer,
    net: Conditioner,
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        form: CouplingForm,
        net_cfg: &ConditionerConfig,
        u_init: f64,
        eps: f64,
        rng: &mut FlowRng,
    ) -> Result<Self> {
        let [h, w, c] = shape;
        if c % 2 != 0 {
            return Err(Error::Config(format!(
                "{name}: coupling needs an even channel count, got {c}"
            )));
        }
        let c2 = c / 2;
        let mut head_bias = None;
        let out = match form {
            CouplingForm::Affine => HeadShape::PerSite { channels: 2 * c2 },
            CouplingForm::Location => HeadShape::PerSite { channels: c2 * c2 + c2 },
            CouplingForm::Dense => {
                let d = h * w * c2;
                HeadShape::Flat { outputs: d * d + d }
            }
            CouplingForm::LowRank { rank, .. } => {
                if rank == 0 || rank > c2 {
                    return Err(Error::Config(format!(
                        "{name}: low-rank rank {rank} must lie in 1..={c2} (half of {c} channels)"
                    )));
                }
                // A zero A2 would leave A1 without gradient, so A2 starts at
                // [I 0] while A1 starts at zero; S = A1·A2 is still zero.
                let channels = 2 * c2 * rank + c2;
                let mut bias = vec![0.0; channels];
                for r in 0..rank {
                    bias[c2 * rank + r * c2 + r] = 1.0;
                }
                head_bias = Some(DenseArray::from_vec(bias));
                HeadShape::PerSite { channels }
            }
        };
        let stabilizer = Stabilizer::new(store, &format!("{name}.stab"), u_init);
        let net = Conditioner::new(store, &format!("{name}.net"), [h, w, c2], out, net_cfg, head_bias, rng)?;
        Ok(Self {
            name: name.to_string(),
            shape,
            form,
            eps,
            stabilizer,
            net,
        })
    }

    pub fn form(&self) -> CouplingForm {
        self.form
    }

    fn half(&self) -> usize {
        self.shape[2] / 2
    }

    /// Runs the conditioner on `x¹` and returns the stabilized transform and
    /// the shift `b: [n, h, w, c/2]`.
    fn site<'t>(&self, ctx: &Ctx<'t, '_>, x1: Var<'t>) -> Result<(Site<'t>, Var<'t>)> {
        let [n, h, w, c2] = super::nhwc("coupling", &x1.shape())?;
        let out = self.net.forward(ctx, x1)?;
        let sites = n * h * w;
        let stab = |v: Var<'t>| self.stabilizer.apply(ctx, v);
        Ok(match self.form {
            CouplingForm::Affine => (Site::Diag(stab(out.slice_last(0, c2)?)?), out.slice_last(c2, c2)?),
            CouplingForm::Location => {
                let s = out.slice_last(0, c2 * c2)?.reshape(&[sites, c2, c2])?;
                (Site::Full(stab(s)?), out.slice_last(c2 * c2, c2)?)
            }
            CouplingForm::Dense => {
                let d = h * w * c2;
                let s = out.slice_last(0, d * d)?.reshape(&[n, d, d])?;
                let b = out.slice_last(d * d, d)?.reshape(&[n, h, w, c2])?;
                (Site::Full(stab(s)?), b)
            }
            CouplingForm::LowRank {
                rank: t,
                stabilize_factors,
            } => {
                let a1 = out.slice_last(0, c2 * t)?.reshape(&[sites, c2, t])?;
                let a2 = out.slice_last(c2 * t, t * c2)?.reshape(&[sites, t, c2])?;
                let b = out.slice_last(2 * c2 * t, c2)?;
                if stabilize_factors {
                    (Site::Factors(stab(a1)?, stab(a2)?), b)
                } else {
                    (Site::Full(stab(a1.bmm(a2)?)?), b)
                }
            }
        })
    }

    fn logdet<'t>(site: &Site<'t>, n: usize) -> Result<Var<'t>> {
        let traces = match site {
            Site::Diag(s) => return s.sum(&[1, 2, 3]),
            Site::Full(s) => s.batch_trace()?,
            Site::Factors(a1, a2) => a2.bmm(*a1)?.batch_trace()?,
        };
        let per = traces.shape()[0] / n;
        traces.reshape(&[n, per])?.sum(&[1])
    }

    /// `e^{sign·S}·v` for `v: [n, h, w, c/2]`.
    fn apply<'t>(&self, tape: &'t Tape, site: &Site<'t>, v: Var<'t>, sign: f64) -> Result<Var<'t>> {
        let shape = v.shape();
        let e = match site {
            Site::Diag(s) => return v.mul(s.scale(sign).exp()),
            Site::Full(s) => s.scale(sign).batch_matexp(self.eps)?.0,
            Site::Factors(a1, a2) => {
                let a1 = a1.scale(sign);
                let (x, _) = a2.bmm(a1)?.batch_lowrank_series(self.eps)?;
                let [b, m, _] = *a1.value().shape() else { unreachable!() };
                tape.constant(DenseArray::identity_stack(b, m))
                    .add(a1.bmm(x)?.bmm(*a2)?)?
            }
        };
        let [b, m, _] = *e.value().shape() else { unreachable!() };
        e.bmm(v.reshape(&[b, m, 1])?)?.reshape(&shape)
    }

    /// Stabilized log-scale (affine) or matrices (dense, location, low-rank
    /// product) the conditioner assigns to `x`.
    pub fn effective_scale(&self, params: &ParamStore, x: &DenseArray) -> Result<DenseArray> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        let x1 = tape.constant(x.slice_last(0, self.half())?);
        match self.site(&ctx, x1)?.0 {
            Site::Diag(s) | Site::Full(s) => Ok((*s.value()).clone()),
            Site::Factors(a1, a2) => Ok((*a1.bmm(a2)?.value()).clone()),
        }
    }
}

impl FlowLayer for Coupling {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [n, ..] = check_channels("coupling", &x.shape(), &self.shape)?;
        let c2 = self.half();
        let (x1, x2) = (x.slice_last(0, c2)?, x.slice_last(c2, c2)?);
        let (site, b) = self.site(ctx, x1)?;
        let y2 = self.apply(ctx.tape(), &site, x2, 1.0)?.add(b)?;
        Ok((x1.concat_last(y2)?, Self::logdet(&site, n)?))
    }

    fn inverse(&self, params: &ParamStore, y: &DenseArray) -> Result<DenseArray> {
        check_channels("coupling inverse", y.shape(), &self.shape)?;
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        let c2 = self.half();
        let y = tape.constant(y.clone());
        let (y1, y2) = (y.slice_last(0, c2)?, y.slice_last(c2, c2)?);
        let (site, b) = self.site(&ctx, y1)?;
        let x2 = self.apply(&tape, &site, y2.sub(b)?, -1.0)?;
        Ok((*y1.concat_last(x2)?.value()).clone())
    }
}
