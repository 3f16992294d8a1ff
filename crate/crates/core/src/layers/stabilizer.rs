use crate::array::DenseArray;
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore};

/// Learnable scalars bounding a log-scale: `S̃ = u1·tanh(u2·S + v2) + v1`,
/// applied elementwise.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    pub u1: ParamId,
    pub v1: ParamId,
    pub u2: ParamId,
    pub v2: ParamId,
}

impl Stabilizer {
    pub fn new(store: &mut ParamStore, prefix: &str, u_init: f64) -> Self {
        Self {
            u1: store.add(&format!("{prefix}.u1"), DenseArray::scalar(u_init)),
            v1: store.add(&format!("{prefix}.v1"), DenseArray::scalar(0.0)),
            u2: store.add(&format!("{prefix}.u2"), DenseArray::scalar(u_init)),
            v2: store.add(&format!("{prefix}.v2"), DenseArray::scalar(0.0)),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'t, '_>, s: Var<'t>) -> Result<Var<'t>> {
        s.mul(ctx.var(self.u2))?
            .add(ctx.var(self.v2))?
            .tanh()
            .mul(ctx.var(self.u1))?
            .add(ctx.var(self.v1))
    }

    /// Plain-array version of [`Stabilizer::apply`].
    pub fn apply_array(&self, params: &ParamStore, s: &DenseArray) -> DenseArray {
        let [u1, v1, u2, v2] = [self.u1, self.v1, self.u2, self.v2].map(|id| params.get(id).item());
        s.map(|x| u1 * (u2 * x + v2).tanh() + v1)
    }

    /// Resets both multipliers, leaving the shifts alone.
    pub fn set_u(&self, params: &mut ParamStore, u: f64) {
        *params.get_mut(self.u1) = DenseArray::scalar(u);
        *params.get_mut(self.u2) = DenseArray::scalar(u);
    }
}
