use super::{check_channels, per_sample, ConvKind, FlowLayer};
use crate::array::DenseArray;
use crate::autodiff::Var;
use crate::error::Result;
use crate::linalg::{solve_lower, solve_upper, Lu};
use crate::matexp::{expm, skew_symmetric_init};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::FlowRng;

#[derive(Debug, Clone)]
enum Weights {
    Matexp {
        w: ParamId,
    },
    Standard {
        m: ParamId,
    },
    /// `P·(L + I)·(U + diag(sign·exp(log_s)))` with `L`, `U` masked to their
    /// strict triangles.
    Plu {
        p: ParamId,
        l: ParamId,
        u: ParamId,
        log_s: ParamId,
        sign: ParamId,
    },
}

/// Per-site channel mixing `y_{i,j,:} = E·x_{i,j,:}`.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    name: String,
    shape: [usize; 3],
    eps: f64,
    weights: Weights,
}

fn strict_mask(c: usize, lower: bool) -> DenseArray {
    let mut m = DenseArray::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            if (lower && j < i) || (!lower && j > i) {
                m.data_mut()[i * c + j] = 1.0;
            }
        }
    }
    m
}

impl Conv1x1 {
    /// `init_scale` scales the skew-symmetric generator of the matexp
    /// variant (0 gives the identity) and the rotation used to seed the
    /// other two.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        kind: ConvKind,
        init_scale: f64,
        eps: f64,
        rng: &mut FlowRng,
    ) -> Result<Self> {
        let c = shape[2];
        let gen = skew_symmetric_init(c, rng, init_scale).into_array();
        let weights = match kind {
            ConvKind::Matexp => Weights::Matexp {
                w: store.add(&format!("{name}.w"), gen),
            },
            ConvKind::Standard => Weights::Standard {
                m: store.add(&format!("{name}.m"), expm(&gen, eps)?),
            },
            ConvKind::Plu => {
                let rot = expm(&gen, eps)?;
                let lu = Lu::factor(&rot)?;
                let upper = lu.upper();
                let diag: Vec<f64> = (0..c).map(|i| upper.data()[i * c + i]).collect();
                let strict_u = upper.zip_map(&strict_mask(c, false), "plu init", |a, m| a * m)?;
                let strict_l = lu.lower().zip_map(&strict_mask(c, true), "plu init", |a, m| a * m)?;
                Weights::Plu {
                    p: store.add_buffer(&format!("{name}.p"), lu.permutation_matrix().transpose()?),
                    l: store.add(&format!("{name}.l"), strict_l),
                    u: store.add(&format!("{name}.u"), strict_u),
                    log_s: store.add(
                        &format!("{name}.log_s"),
                        DenseArray::from_vec(diag.iter().map(|d| d.abs().ln()).collect()),
                    ),
                    sign: store.add_buffer(
                        &format!("{name}.sign"),
                        DenseArray::from_vec(diag.iter().map(|d| d.signum()).collect()),
                    ),
                }
            }
        };
        Ok(Self {
            name: name.to_string(),
            shape,
            eps,
            weights,
        })
    }

    pub fn kind(&self) -> ConvKind {
        match self.weights {
            Weights::Matexp { .. } => ConvKind::Matexp,
            Weights::Standard { .. } => ConvKind::Standard,
            Weights::Plu { .. } => ConvKind::Plu,
        }
    }

    /// The parameter holding the dense weight (`W` or `M`); `None` for PLU.
    pub fn weight_param(&self) -> Option<ParamId> {
        match self.weights {
            Weights::Matexp { w } => Some(w),
            Weights::Standard { m } => Some(m),
            Weights::Plu { .. } => None,
        }
    }

    /// Mixing matrix `E` and the log-determinant of one site.
    fn matrix<'t>(&self, ctx: &Ctx<'t, '_>) -> Result<(Var<'t>, Var<'t>)> {
        let c = self.shape[2];
        let tape = ctx.tape();
        match self.weights {
            Weights::Matexp { w } => {
                let w = ctx.var(w).reshape(&[1, c, c])?;
                let (e, _) = w.batch_matexp(self.eps)?;
                Ok((e.reshape(&[c, c])?, w.batch_trace()?))
            }
            Weights::Standard { m } => {
                let m = ctx.var(m);
                Ok((m, m.logabsdet()?))
            }
            Weights::Plu { p, l, u, log_s, sign } => {
                let eye = tape.constant(DenseArray::identity(c));
                let lm = ctx.var(l).mul(tape.constant(strict_mask(c, true)))?.add(eye)?;
                let log_s = ctx.var(log_s);
                let diag = ctx.var(sign).mul(log_s.exp())?.diag_embed()?;
                let um = ctx.var(u).mul(tape.constant(strict_mask(c, false)))?.add(diag)?;
                Ok((ctx.var(p).matmul(lm)?.matmul(um)?, log_s.sum_all()))
            }
        }
    }

    /// The current mixing matrix as a plain array.
    pub fn weight_matrix(&self, params: &ParamStore) -> Result<DenseArray> {
        let tape = crate::autodiff::Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        if let Weights::Standard { m } = self.weights {
            return Ok(params.get(m).clone());
        }
        Ok((*self.matrix(&ctx)?.0.value()).clone())
    }
}

impl FlowLayer for Conv1x1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [n, h, w, c] = check_channels("conv1x1", &x.shape(), &self.shape)?;
        let (e, ld) = self.matrix(ctx).map_err(|err| match err {
            crate::Error::Singular { condition, .. } => crate::Error::Singular {
                what: self.name.clone(),
                condition,
            },
            other => other,
        })?;
        let y = x
            .reshape(&[n * h * w, c])?
            .matmul(e.transpose()?)?
            .reshape(&[n, h, w, c])?;
        Ok((y, per_sample(ctx.tape(), ld.scale((h * w) as f64), n)?))
    }

    fn inverse(&self, params: &ParamStore, y: &DenseArray) -> Result<DenseArray> {
        let [n, h, w, c] = check_channels("conv1x1 inverse", y.shape(), &self.shape)?;
        let rows = y.reshape(&[n * h * w, c])?;
        let x = match self.weights {
            Weights::Matexp { w } => {
                let inv = expm(&params.get(w).scale(-1.0), self.eps)?;
                rows.matmul(&inv.transpose()?)?
            }
            Weights::Standard { m } => {
                let lu = Lu::factor(params.get(m))?;
                lu.check_invertible(&self.name)?;
                lu.solve(&rows.transpose()?)?.transpose()?
            }
            Weights::Plu { p, l, u, log_s, sign } => {
                let lm = params
                    .get(l)
                    .zip_map(&strict_mask(c, true), "plu", |a, m| a * m)?
                    .add(&DenseArray::identity(c))?;
                let d: Vec<f64> = params
                    .get(sign)
                    .data()
                    .iter()
                    .zip(params.get(log_s).data())
                    .map(|(s, ls)| s * ls.exp())
                    .collect();
                let um = params
                    .get(u)
                    .zip_map(&strict_mask(c, false), "plu", |a, m| a * m)?
                    .add(&DenseArray::diag(&d))?;
                let z = params.get(p).transpose()?.matmul(&rows.transpose()?)?;
                solve_upper(&um, &solve_lower(&lm, &z)?)?.transpose()?
            }
        };
        x.into_reshape(&[n, h, w, c])
    }
}
