//! Residual convolutional networks producing coupling parameters.
//!
//! Layout: a 3×3 input convolution and ELU, `blocks` residual blocks
//! (3×3 → ELU → 1×1 → ELU → 3×3, added to the block input), a final ELU and
//! a zero-initialized output head. On 1×1 spatial inputs every kernel is 1×1,
//! which turns the network into a residual MLP.

use crate::array::DenseArray;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::FlowRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionerConfig {
    pub blocks: usize,
    pub hidden: usize,
    /// Standard deviation of the normal initialization of hidden weights.
    pub init_std: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 32,
            init_std: 0.05,
        }
    }
}

/// How the head maps features to outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadShape {
    /// A convolution emitting `channels` values per site: `[n, h, w, channels]`.
    PerSite { channels: usize },
    /// A dense layer over all flattened features: `[n, outputs]`.
    Flat { outputs: usize },
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, std: f64, rng: &mut FlowRng) -> Self {
        let w = DenseArray::new(
            &[k, k, cin, cout],
            rng.normals(k * k * cin * cout).into_iter().map(|v| v * std).collect(),
        )
        .expect("extents match data");
        Self {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), DenseArray::zeros(&[cout])),
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(ctx.var(self.w))?.add(ctx.var(self.b))
    }
}

#[derive(Debug, Clone)]
enum Head {
    Conv(Conv),
    Dense { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    shape: [usize; 3],
    out: HeadShape,
    input: Conv,
    blocks: Vec<[Conv; 3]>,
    head: Head,
}

impl Conditioner {
    /// `shape` is the `[h, w, c]` of the conditioning input. `head_bias`
    /// overrides the zero initial bias of the head.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        out: HeadShape,
        cfg: &ConditionerConfig,
        head_bias: Option<DenseArray>,
        rng: &mut FlowRng,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("conditioner needs at least one hidden channel".into()));
        }
        let [h, w, c] = shape;
        let k = if h == 1 && w == 1 { 1 } else { 3 };
        let hid = cfg.hidden;
        let input = Conv::new(store, &format!("{name}.in"), k, c, hid, cfg.init_std, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("{name}.block{i}");
                [
                    Conv::new(store, &format!("{p}.a"), k, hid, hid, cfg.init_std, rng),
                    Conv::new(store, &format!("{p}.b"), 1, hid, hid, cfg.init_std, rng),
                    Conv::new(store, &format!("{p}.c"), k, hid, hid, cfg.init_std, rng),
                ]
            })
            .collect();
        let n_out = match out {
            HeadShape::PerSite { channels } => channels,
            HeadShape::Flat { outputs } => outputs,
        };
        let bias = match head_bias {
            Some(b) if b.shape() != [n_out] => return Err(Error::shape("conditioner head bias", &[n_out], b.shape())),
            Some(b) => b,
            None => DenseArray::zeros(&[n_out]),
        };
        let head = match out {
            HeadShape::PerSite { channels } => Head::Conv(Conv {
                w: store.add(&format!("{name}.head.w"), DenseArray::zeros(&[k, k, hid, channels])),
                b: store.add(&format!("{name}.head.b"), bias),
            }),
            HeadShape::Flat { outputs } => Head::Dense {
                w: store.add(&format!("{name}.head.w"), DenseArray::zeros(&[h * w * hid, outputs])),
                b: store.add(&format!("{name}.head.b"), bias),
            },
        };
        Ok(Self {
            shape,
            out,
            input,
            blocks,
            head,
        })
    }

    pub fn output(&self) -> HeadShape {
        self.out
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let n = match *shape {
            [n, h, w, c] if [h, w, c] == self.shape => n,
            _ => return Err(Error::shape("conditioner", &self.shape, &shape)),
        };
        let mut h = self.input.apply(ctx, x)?.elu();
        for [a, b, c] in &self.blocks {
            let t = a.apply(ctx, h)?.elu();
            let t = b.apply(ctx, t)?.elu();
            h = h.add(c.apply(ctx, t)?)?;
        }
        let h = h.elu();
        match &self.head {
            Head::Conv(conv) => conv.apply(ctx, h),
            Head::Dense { w, b } => {
                let feats = h.value().len() / n;
                h.reshape(&[n, feats])?.matmul(ctx.var(*w))?.add(ctx.var(*b))
            }
        }
    }
}
