use super::{check_channels, per_sample, FlowLayer};
use crate::array::DenseArray;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};

/// Smallest admissible `|s|`; updates that shrink a scale further are
/// clamped by [`Actnorm::clamp_scale`].
pub const MIN_SCALE: f64 = 1e-12;

/// Per-channel `y = s∘x + b`.
#[derive(Debug, Clone)]
pub struct Actnorm {
    name: String,
    shape: [usize; 3],
    pub s: ParamId,
    pub b: ParamId,
    initialized: ParamId,
}

impl Actnorm {
    pub fn new(store: &mut ParamStore, name: &str, shape: [usize; 3]) -> Self {
        let c = shape[2];
        Self {
            name: name.to_string(),
            shape,
            s: store.add(&format!("{name}.s"), DenseArray::ones(&[c])),
            b: store.add(&format!("{name}.b"), DenseArray::zeros(&[c])),
            initialized: store.add_buffer(&format!("{name}.initialized"), DenseArray::scalar(0.0)),
        }
    }

    pub fn is_initialized(&self, params: &ParamStore) -> bool {
        params.get(self.initialized).item() != 0.0
    }

    /// Marks the layer initialized with its current parameters.
    pub fn mark_initialized(&self, params: &mut ParamStore) {
        *params.get_mut(self.initialized) = DenseArray::scalar(1.0);
    }

    /// Pushes every `|s|` up to [`MIN_SCALE`], keeping its sign.
    pub fn clamp_scale(&self, params: &mut ParamStore) {
        for v in params.get_mut(self.s).data_mut() {
            if v.abs() < MIN_SCALE {
                *v = if *v < 0.0 { -MIN_SCALE } else { MIN_SCALE };
            }
        }
    }

    fn check_ready(&self, params: &ParamStore) -> Result<()> {
        if !self.is_initialized(params) {
            return Err(Error::NotInitialized(self.name.clone()));
        }
        if params.get(self.s).data().contains(&0.0) {
            return Err(Error::invalid(
                "actnorm",
                format!("{}: zero scale is not invertible", self.name),
            ));
        }
        Ok(())
    }
}

impl FlowLayer for Actnorm {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_ready(ctx.params())?;
        let [n, h, w, _] = check_channels("actnorm", &x.shape(), &self.shape)?;
        let s = ctx.var(self.s);
        let y = x.mul(s)?.add(ctx.var(self.b))?;
        let ld = s.abs().ln().sum_all().scale((h * w) as f64);
        Ok((y, per_sample(ctx.tape(), ld, n)?))
    }

    fn inverse(&self, params: &ParamStore, y: &DenseArray) -> Result<DenseArray> {
        self.check_ready(params)?;
        check_channels("actnorm inverse", y.shape(), &self.shape)?;
        let (s, b) = (params.get(self.s).data(), params.get(self.b).data());
        let c = s.len();
        let mut x = y.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (*v - b[i % c]) / s[i % c];
        }
        Ok(x)
    }

    /// Sets `s = 1/std` and `b = −mean/std` per channel over the batch, so
    /// the batch leaves the layer standardized. Constant channels get unit
    /// scale.
    fn data_init(&self, params: &mut ParamStore, x: &DenseArray) -> Result<()> {
        if self.is_initialized(params) {
            return Ok(());
        }
        check_channels("actnorm init", x.shape(), &self.shape)?;
        let c = self.shape[2];
        let count = (x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
        let (mut s, mut b) = (vec![0.0; c], vec![0.0; c]);
        for ch in 0..c {
            let std = (var[ch] / count).sqrt();
            s[ch] = if std > 1e-8 { 1.0 / std } else { 1.0 };
            b[ch] = -mean[ch] * s[ch];
        }
        params.set(self.s, DenseArray::from_vec(s))?;
        params.set(self.b, DenseArray::from_vec(b))?;
        self.mark_initialized(params);
        Ok(())
    }
}
