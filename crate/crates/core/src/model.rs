//! The multiscale flow and its likelihood under a standard-normal prior.
//!
//! Image models run `levels` levels of squeeze, `depth` steps of
//! (actnorm → 1×1 convolution → coupling) and, except after the last level,
//! a split that hands the second channel half to the prior. Flat models
//! (2-D points) run a single stack of steps with no squeeze or split.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::conditioner::ConditionerConfig;
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::layers::{
    squeeze_shape, unsplit, Actnorm, Conv1x1, ConvKind, Coupling, CouplingForm, FlowLayer, Layer, Squeeze, Stabilizer,
};
use crate::matexp::DEFAULT_EPS;
use crate::params::{Ctx, ParamStore};
use crate::rng::FlowRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    Affine,
    Matexp,
    MatexpLowRank,
}

impl FromStr for CouplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Self::Affine),
            "matexp" => Ok(Self::Matexp),
            "matexp-lowrank" => Ok(Self::MatexpLowRank),
            _ => Err(Error::Config(format!(
                "unknown coupling `{s}` (expected affine, matexp or matexp-lowrank)"
            ))),
        }
    }
}

impl fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Affine => "affine",
            Self::Matexp => "matexp",
            Self::MatexpLowRank => "matexp-lowrank",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `[h, w, c]` of one input.
    pub input: [usize; 3],
    /// Plain stack without squeeze or split.
    pub flat: bool,
    pub levels: usize,
    pub depth: usize,
    pub coupling: CouplingKind,
    /// `false` selects one matrix per site, `true` one matrix per sample.
    pub dense: bool,
    pub rank: usize,
    pub stabilize_factors: bool,
    pub conv: ConvKind,
    pub conv_init_scale: f64,
    pub net: ConditionerConfig,
    pub u_init: f64,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [8, 8, 1],
            flat: false,
            levels: 2,
            depth: 4,
            coupling: CouplingKind::Matexp,
            dense: false,
            rank: 1,
            stabilize_factors: false,
            conv: ConvKind::Matexp,
            conv_init_scale: 1.0,
            net: ConditionerConfig::default(),
            u_init: 1.0,
            eps: DEFAULT_EPS,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "input",
    "flat",
    "levels",
    "depth",
    "coupling",
    "matexp_form",
    "rank",
    "stabilize_factors",
    "conv",
    "conv_init_scale",
    "hidden",
    "blocks",
    "init_std",
    "u_init",
    "eps",
];

impl ModelConfig {
    /// The 2-D point model: six steps on `[1, 1, 2]`.
    pub fn points() -> Self {
        Self {
            input: [1, 1, 2],
            flat: true,
            levels: 1,
            depth: 6,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> usize {
        self.input.iter().product()
    }

    pub fn form(&self) -> CouplingForm {
        match self.coupling {
            CouplingKind::Affine => CouplingForm::Affine,
            CouplingKind::Matexp if self.dense => CouplingForm::Dense,
            CouplingKind::Matexp => CouplingForm::Location,
            CouplingKind::MatexpLowRank => CouplingForm::LowRank {
                rank: self.rank,
                stabilize_factors: self.stabilize_factors,
            },
        }
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let base = if map.parse_or("flat", false)? {
            Self::points()
        } else {
            Self::default()
        };
        let input = match map.parse_list::<usize>("input")? {
            None => base.input,
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => return Err(Error::Config(format!("input needs h,w,c, got {} values", v.len()))),
        };
        let dense = match map.get("matexp_form").unwrap_or("location") {
            "location" => false,
            "dense" => true,
            other => {
                return Err(Error::Config(format!(
                    "unknown matexp_form `{other}` (expected location or dense)"
                )))
            }
        };
        let cfg = Self {
            input,
            flat: base.flat,
            levels: map.parse_or("levels", base.levels)?,
            depth: map.parse_or("depth", base.depth)?,
            coupling: map.parse_or("coupling", base.coupling)?,
            dense,
            rank: map.parse_or("rank", base.rank)?,
            stabilize_factors: map.parse_or("stabilize_factors", base.stabilize_factors)?,
            conv: map.parse_or("conv", base.conv)?,
            conv_init_scale: map.parse_or("conv_init_scale", base.conv_init_scale)?,
            net: ConditionerConfig {
                blocks: map.parse_or("blocks", base.net.blocks)?,
                hidden: map.parse_or("hidden", base.net.hidden)?,
                init_std: map.parse_or("init_std", base.net.init_std)?,
            },
            u_init: map.parse_or("u_init", base.u_init)?,
            eps: map.parse_or("eps", base.eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set(
            "input",
            format!("{},{},{}", self.input[0], self.input[1], self.input[2]),
        );
        m.set("flat", self.flat);
        m.set("levels", self.levels);
        m.set("depth", self.depth);
        m.set("coupling", self.coupling);
        m.set("matexp_form", if self.dense { "dense" } else { "location" });
        m.set("rank", self.rank);
        m.set("stabilize_factors", self.stabilize_factors);
        m.set("conv", self.conv);
        m.set("conv_init_scale", self.conv_init_scale);
        m.set("hidden", self.net.hidden);
        m.set("blocks", self.net.blocks);
        m.set("init_std", self.net.init_std);
        m.set("u_init", self.u_init);
        m.set("eps", self.eps);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("input extents {h},{w},{c} must be positive")));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.flat {
            if c % 2 != 0 {
                return Err(Error::Config(format!("flat models need an even dimension, got {c}")));
            }
            if h != 1 || w != 1 {
                return Err(Error::Config("flat models take input 1,1,d".into()));
            }
        } else {
            if self.levels == 0 {
                return Err(Error::Config("levels must be at least 1".into()));
            }
            let f = 1usize << self.levels;
            if h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "spatial extents {h}×{w} are not divisible by 2^{} for {} levels",
                    self.levels, self.levels
                )));
            }
        }
        if self.coupling == CouplingKind::MatexpLowRank {
            let half = self.level_shapes().iter().map(|s| s[2] / 2).min().unwrap_or(0);
            if self.rank == 0 || self.rank > half {
                return Err(Error::Config(format!(
                    "rank {} must lie in 1..={half} (half the channels of the narrowest level)",
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Activation extents inside each level.
    fn level_shapes(&self) -> Vec<[usize; 3]> {
        if self.flat {
            return vec![self.input];
        }
        let mut shapes = Vec::new();
        let mut s = self.input;
        for l in 0..self.levels {
            s = match squeeze_shape(s) {
                Ok(v) => v,
                Err(_) => break,
            };
            shapes.push(s);
            if l + 1 < self.levels {
                s[2] /= 2;
            }
        }
        shapes
    }
}

struct Level {
    layers: Vec<Layer>,
    /// Shape of the part handed to the prior at the end of the level.
    latent: [usize; 3],
    split: bool,
}

/// Latent parts in level order: one factored half per split, then the
/// final activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub parts: Vec<DenseArray>,
}

impl LatentBundle {
    pub fn len(&self) -> usize {
        self.parts.iter().map(DenseArray::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct FlowModel {
    cfg: ModelConfig,
    levels: Vec<Level>,
}

/// `log N(z; 0, I)` per sample for `z: [n, ...]`.
fn prior_log_density<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let shape = z.shape();
    let d: usize = shape[1..].iter().product();
    let axes: Vec<usize> = (1..shape.len()).collect();
    Ok(z.square().sum(&axes)?.affine(-0.5, -0.5 * d as f64 * (2.0 * PI).ln()))
}

impl FlowModel {
    /// Builds the layers and registers their parameters. Initial values are
    /// drawn from a stream derived from `seed`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = FlowRng::derive(seed, "init");
        let form = cfg.form();
        let mut levels = Vec::new();
        let mut shape = cfg.input;
        let n_levels = if cfg.flat { 1 } else { cfg.levels };
        for l in 0..n_levels {
            let mut layers = Vec::new();
            let prefix = if cfg.flat { String::new() } else { format!("level{l}.") };
            if !cfg.flat {
                let sq = Squeeze::new(&format!("{prefix}squeeze"), shape)?;
                shape = sq.output_shape();
                layers.push(Layer::Squeeze(sq));
            }
            for d in 0..cfg.depth {
                let p = format!("{prefix}step{d}");
                layers.push(Layer::Actnorm(Actnorm::new(store, &format!("{p}.actnorm"), shape)));
                layers.push(Layer::Conv1x1(Conv1x1::new(
                    store,
                    &format!("{p}.conv"),
                    shape,
                    cfg.conv,
                    cfg.conv_init_scale,
                    cfg.eps,
                    &mut rng,
                )?));
                layers.push(Layer::Coupling(Coupling::new(
                    store,
                    &format!("{p}.coupling"),
                    shape,
                    form,
                    &cfg.net,
                    cfg.u_init,
                    cfg.eps,
                    &mut rng,
                )?));
            }
            let split = !cfg.flat && l + 1 < n_levels;
            if split {
                shape[2] /= 2;
            }
            levels.push(Level {
                layers,
                latent: shape,
                split,
            });
        }
        Ok(Self { cfg, levels })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Dimensions of one input.
    pub fn dims(&self) -> usize {
        self.cfg.dims()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.levels.iter().flat_map(|l| l.layers.iter())
    }

    pub fn stabilizers(&self) -> Vec<&Stabilizer> {
        self.layers()
            .filter_map(|l| match l {
                Layer::Coupling(c) => Some(&c.stabilizer),
                _ => None,
            })
            .collect()
    }

    /// Shapes of the latent parts for one sample.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        self.levels.iter().map(|l| l.latent).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [n, h, w, c] if [h, w, c] == self.cfg.input => Ok(n),
            _ => Err(Error::shape("model input", &self.cfg.input, shape)),
        }
    }

    /// Latent parts and the summed log-determinant `[n]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let n = self.check_input(&x.shape())?;
        let mut h = x;
        let mut logdet = ctx.tape().constant(DenseArray::zeros(&[n]));
        let mut parts = Vec::new();
        for level in &self.levels {
            for layer in &level.layers {
                let (y, ld) = layer.forward(ctx, h)?;
                h = y;
                logdet = logdet.add(ld)?;
            }
            if level.split {
                let c = *h.shape().last().unwrap();
                parts.push(h.slice_last(c / 2, c / 2)?);
                h = h.slice_last(0, c / 2)?;
            }
        }
        parts.push(h);
        Ok((parts, logdet))
    }

    /// Per-sample `log p(x)`, shape `[n]`.
    pub fn log_prob<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (parts, logdet) = self.forward(ctx, x)?;
        let mut lp = logdet;
        for z in parts {
            lp = lp.add(prior_log_density(z)?)?;
        }
        Ok(lp)
    }

    pub fn log_prob_array(&self, params: &ParamStore, x: &DenseArray) -> Result<DenseArray> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        let lp = self.log_prob(&ctx, tape.constant(x.clone()))?;
        Ok((*lp.value()).clone())
    }

    pub fn encode(&self, params: &ParamStore, x: &DenseArray) -> Result<(LatentBundle, DenseArray)> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, params);
        let (parts, logdet) = self.forward(&ctx, tape.constant(x.clone()))?;
        let parts = parts.iter().map(|p| (*p.value()).clone()).collect();
        Ok((LatentBundle { parts }, (*logdet.value()).clone()))
    }

    pub fn decode(&self, params: &ParamStore, z: &LatentBundle) -> Result<DenseArray> {
        if z.parts.len() != self.levels.len() {
            return Err(Error::invalid(
                "decode",
                format!("expected {} latent parts, got {}", self.levels.len(), z.parts.len()),
            ));
        }
        let n = z.parts[0].shape()[0];
        for (p, s) in z.parts.iter().zip(self.latent_shapes()) {
            if p.shape() != [n, s[0], s[1], s[2]] {
                return Err(Error::shape("decode", &[n, s[0], s[1], s[2]], p.shape()));
            }
        }
        let mut h = z.parts.last().unwrap().clone();
        for (i, level) in self.levels.iter().enumerate().rev() {
            if level.split {
                h = unsplit(&h, &z.parts[i])?;
            }
            for layer in level.layers.iter().rev() {
                h = layer.inverse(params, &h)?;
            }
        }
        Ok(h)
    }

    /// Runs data-dependent actnorm initialization on `x`, layer by layer.
    pub fn initialize(&self, params: &mut ParamStore, x: &DenseArray) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for level in &self.levels {
            for layer in &level.layers {
                layer.data_init(params, &h)?;
                h = layer.forward_array(params, &h)?.0;
            }
            if level.split {
                let c = *h.shape().last().unwrap();
                h = h.slice_last(0, c / 2)?;
            }
        }
        Ok(())
    }

    /// Calls `visit(layer, input)` for every layer on the activations of `x`.
    pub fn trace_layers(
        &self,
        params: &ParamStore,
        x: &DenseArray,
        mut visit: impl FnMut(&Layer, &DenseArray) -> Result<()>,
    ) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for level in &self.levels {
            for layer in &level.layers {
                visit(layer, &h)?;
                h = layer.forward_array(params, &h)?.0;
            }
            if level.split {
                let c = *h.shape().last().unwrap();
                h = h.slice_last(0, c / 2)?;
            }
        }
        Ok(())
    }

    /// Keeps parameters inside their valid region after an update.
    pub fn post_update(&self, params: &mut ParamStore) {
        for layer in self.layers() {
            if let Layer::Actnorm(a) = layer {
                a.clamp_scale(params);
            }
        }
    }

    pub fn set_stabilizer_u(&self, params: &mut ParamStore, u: f64) {
        for s in self.stabilizers() {
            s.set_u(params, u);
        }
    }

    /// Latent bundle with entries drawn from `N(0, temperature²)`.
    pub fn sample_latent(&self, count: usize, temperature: f64, rng: &mut FlowRng) -> Result<LatentBundle> {
        let parts = self
            .latent_shapes()
            .into_iter()
            .map(|[h, w, c]| {
                let data = rng
                    .normals(count * h * w * c)
                    .into_iter()
                    .map(|v| v * temperature)
                    .collect();
                DenseArray::new(&[count, h, w, c], data)
            })
            .collect::<Result<_>>()?;
        Ok(LatentBundle { parts })
    }

    pub fn sample(&self, params: &ParamStore, count: usize, temperature: f64, rng: &mut FlowRng) -> Result<DenseArray> {
        self.decode(params, &self.sample_latent(count, temperature, rng)?)
    }
}

/// Bits per dimension of inputs dequantized to `[0, 1)` from `levels`
/// discrete values, given their mean log-density.
pub fn bits_per_dim(mean_log_prob: f64, dims: usize, levels: u32) -> f64 {
    -mean_log_prob / (dims as f64 * LN_2) + f64::from(levels).log2()
}
