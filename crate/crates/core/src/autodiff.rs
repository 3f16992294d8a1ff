//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! Every operation on a [`Var`] computes its value immediately and, when the
//! tape records, appends a node naming its inputs and whatever the
//! vector–Jacobian product needs later. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates gradients additively, so a value used
//! twice receives the sum of both contributions.
//!
//! Binary operations broadcast only their right operand, and only from a
//! one-element array (scalar) or a rank-1 array matching the last extent
//! (per-channel vector).

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{conv2d_same, conv2d_same_vjp, DenseArray, ReducePlan};
use crate::error::{Error, Result};
use crate::matexp::{series_backward, series_forward, SeriesKind, SeriesStats, SeriesTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Abs,
    Tanh,
    /// Exponential linear unit with α = 1.
    Elu,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Scalar,
    Channel,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Affine {
        x: usize,
        mul: f64,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(usize, usize),
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Transpose(usize),
    DiagEmbed(usize),
    BatchTrace(usize),
    Series {
        x: usize,
        traces: Vec<SeriesTrace>,
    },
    LogAbsDet {
        x: usize,
        inv_t: DenseArray,
    },
}

struct Node {
    value: Rc<DenseArray>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is confined to one execution context. A tape built with
/// [`Tape::no_grad`] still evaluates every operation but keeps no
/// backward information.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var<'_>) -> DenseArray {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| DenseArray::zeros(&self.shapes[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s must not be used
    /// afterwards, which the `&mut` receiver enforces.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn leaf(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.leaf(value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(DenseArray::scalar(value))
    }

    fn push(&self, value: DenseArray, op: Op) -> Var<'_> {
        let op = if self.record { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<DenseArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from `output` seeded with `seed`, which must have the
    /// output's shape. Every earlier node receives the gradient of
    /// `⟨seed, output⟩`.
    pub fn backward(&self, output: Var<'_>, seed: &DenseArray) -> Result<Gradients> {
        assert!(std::ptr::eq(output.tape, self), "output belongs to another tape");
        if !self.record {
            return Err(Error::invalid(
                "backward",
                "tape was created without gradient recording",
            ));
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("backward", seed.shape(), out_shape));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed.clone());
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let contribs = vjp(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (input, cg) in contribs {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&cg)?,
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn val(nodes: &[Node], id: usize) -> &DenseArray {
    &nodes[id].value
}

/// Vector–Jacobian products of one node: `(input id, gradient)` pairs.
fn vjp(nodes: &[Node], node: &Node, g: &DenseArray) -> Result<Vec<(usize, DenseArray)>> {
    let y = &*node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Unary(kind, x) => {
            let xv = val(nodes, *x);
            let gx = match kind {
                UnaryKind::Neg => g.scale(-1.0),
                UnaryKind::Exp => g.zip_map(y, "exp'", |g, y| g * y)?,
                UnaryKind::Ln => g.zip_map(xv, "ln'", |g, x| g / x)?,
                UnaryKind::Abs => g.zip_map(xv, "abs'", |g, x| g * x.signum())?,
                UnaryKind::Tanh => g.zip_map(y, "tanh'", |g, y| g * (1.0 - y * y))?,
                UnaryKind::Elu => g.zip_map(xv, "elu'", |g, x| if x > 0.0 { g } else { g * x.exp() })?,
                UnaryKind::Square => g.zip_map(xv, "square'", |g, x| 2.0 * g * x)?,
            };
            vec![(*x, gx)]
        }
        Op::Affine { x, mul } => vec![(*x, g.scale(*mul))],
        Op::Binary { kind, a, b, bc } => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let bexp = expand(bv, av.shape(), *bc);
            let (ga, gb_full) = match kind {
                BinaryKind::Add => (g.clone(), g.clone()),
                BinaryKind::Sub => (g.clone(), g.scale(-1.0)),
                BinaryKind::Mul => (
                    g.zip_map(&bexp, "mul'", |g, b| g * b)?,
                    g.zip_map(av, "mul'", |g, a| g * a)?,
                ),
                BinaryKind::Div => (
                    g.zip_map(&bexp, "div'", |g, b| g / b)?,
                    g.zip_map(y, "div'", |g, y| -g * y)?
                        .zip_map(&bexp, "div'", |v, b| v / b)?,
                ),
            };
            vec![(*a, ga), (*b, collapse(&gb_full, bv.shape(), *bc))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            vec![(*a, g.matmul(&bv.transpose()?)?), (*b, av.transpose()?.matmul(g)?)]
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            vec![
                (*a, g.bmm(&bv.batch_transpose()?)?),
                (*b, av.batch_transpose()?.bmm(g)?),
            ]
        }
        Op::Conv2d { x, k } => {
            let (gx, gk) = conv2d_same_vjp(val(nodes, *x), val(nodes, *k), g)?;
            vec![(*x, gx), (*k, gk)]
        }
        Op::Reduce { kind, x, axes } => {
            let xv = val(nodes, *x);
            let plan = ReducePlan::new(xv.shape(), axes, "reduce'")?;
            let count = (xv.len() / plan.out_len()) as f64;
            let mut gx = DenseArray::zeros(xv.shape());
            let gd = g.data();
            let yd = y.data();
            for (i, slot) in gx.data_mut().iter_mut().enumerate() {
                let o = plan.out_index(i);
                *slot = match kind {
                    ReduceKind::Sum => gd[o],
                    ReduceKind::Mean => gd[o] / count,
                    ReduceKind::Max => 0.0,
                };
            }
            if *kind == ReduceKind::Max {
                // Route to the first maximal entry of each group.
                let mut taken = vec![false; plan.out_len()];
                for (i, v) in xv.data().iter().enumerate() {
                    let o = plan.out_index(i);
                    if !taken[o] && *v == yd[o] {
                        taken[o] = true;
                        gx.data_mut()[i] = gd[o];
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(nodes, *x).shape())?)],
        Op::SliceLast { x, start } => {
            let xv = val(nodes, *x);
            let c = *xv.shape().last().unwrap();
            let len = *g.shape().last().unwrap();
            let mut gx = DenseArray::zeros(xv.shape());
            let outer = xv.len() / c;
            for o in 0..outer {
                gx.data_mut()[o * c + start..o * c + start + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
            }
            vec![(*x, gx)]
        }
        Op::ConcatLast(a, b) => {
            let ca = *val(nodes, *a).shape().last().unwrap();
            let cb = *val(nodes, *b).shape().last().unwrap();
            vec![(*a, g.slice_last(0, ca)?), (*b, g.slice_last(ca, cb)?)]
        }
        Op::Gather { x, index } => {
            let mut gx = DenseArray::zeros(val(nodes, *x).shape());
            for (o, &i) in index.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
            vec![(*x, gx)]
        }
        Op::Transpose(x) => vec![(*x, g.transpose()?)],
        Op::DiagEmbed(x) => {
            let n = val(nodes, *x).len();
            let d: Vec<f64> = (0..n).map(|i| g.data()[i * n + i]).collect();
            vec![(*x, DenseArray::new(&[n], d)?)]
        }
        Op::BatchTrace(x) => {
            let xv = val(nodes, *x);
            let (b, n) = (xv.shape()[0], xv.shape()[1]);
            let mut gx = DenseArray::zeros(xv.shape());
            for m in 0..b {
                for i in 0..n {
                    gx.data_mut()[m * n * n + i * n + i] = g.data()[m];
                }
            }
            vec![(*x, gx)]
        }
        Op::Series { x, traces } => {
            let xv = val(nodes, *x);
            let n = xv.shape()[1];
            let mut out = Vec::with_capacity(xv.len());
            for (m, tr) in traces.iter().enumerate() {
                out.extend(series_backward(tr, &g.data()[m * n * n..(m + 1) * n * n]));
            }
            vec![(*x, DenseArray::new(xv.shape(), out)?)]
        }
        Op::LogAbsDet { x, inv_t } => vec![(*x, inv_t.scale(g.item()))],
    })
}

/// Broadcasts `b` up to `shape` according to `bc`.
fn expand(b: &DenseArray, shape: &[usize], bc: Broadcast) -> DenseArray {
    match bc {
        Broadcast::None => b.clone(),
        Broadcast::Scalar => DenseArray::full(shape, b.item()),
        Broadcast::Channel => {
            let c = b.len();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| b.data()[i % c]).collect();
            DenseArray::new(shape, data).expect("broadcast shape")
        }
    }
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn collapse(g: &DenseArray, shape: &[usize], bc: Broadcast) -> DenseArray {
    match bc {
        Broadcast::None => g.clone(),
        Broadcast::Scalar => DenseArray::full(shape, g.sum()),
        Broadcast::Channel => {
            let c = shape[0];
            let mut out = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                out[i % c] += v;
            }
            DenseArray::new(shape, out).expect("collapse shape")
        }
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if b.iter().product::<usize>() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() == 1 && Some(&b[0]) == a.last() {
        Ok(Broadcast::Channel)
    } else {
        Err(Error::shape(op, a, b))
    }
}

// The arithmetic methods return `Result` for shape checks, so they cannot be
// the `std::ops` traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<DenseArray> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let x = self.value();
        let y = match kind {
            UnaryKind::Neg => x.map(|v| -v),
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Ln => x.map(f64::ln),
            UnaryKind::Abs => x.map(f64::abs),
            UnaryKind::Tanh => x.map(f64::tanh),
            UnaryKind::Elu => x.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
            UnaryKind::Square => x.map(|v| v * v),
        };
        self.tape.push(y, Op::Unary(kind, self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(UnaryKind::Elu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    /// `mul · x + add` with constant coefficients.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        let y = self.value().map(|v| mul * v + add);
        self.tape.push(y, Op::Affine { x: self.id, mul })
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.affine(k, 0.0)
    }

    pub fn binary(self, kind: BinaryKind, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let bc = broadcast_kind(op, a.shape(), b.shape())?;
        let bexp = expand(&b, a.shape(), bc);
        let y = a.zip_map(&bexp, op, |x, y| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        })?;
        Ok(self.tape.push(
            y,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
                bc,
            },
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, rhs)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let y = self.value().matmul(&rhs.value())?;
        Ok(self.tape.push(y, Op::MatMul(self.id, rhs.id)))
    }

    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let y = self.value().bmm(&rhs.value())?;
        Ok(self.tape.push(y, Op::BatchMatMul(self.id, rhs.id)))
    }

    /// "Same"-padded cross-correlation with `kernel: [kh, kw, cin, cout]`.
    pub fn conv2d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let y = conv2d_same(&self.value(), &kernel.value())?;
        Ok(self.tape.push(
            y,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
            },
        ))
    }

    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = match kind {
            ReduceKind::Sum => x.sum_axes(axes)?,
            ReduceKind::Mean => {
                let s = x.sum_axes(axes)?;
                let count = (x.len() / s.len()) as f64;
                s.scale(1.0 / count)
            }
            ReduceKind::Max => x.max_axes(axes)?,
        };
        Ok(self.tape.push(
            y,
            Op::Reduce {
                kind,
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("all axes are valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self.tape.push(y, Op::Reshape(self.id)))
    }

    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let y = self.value().slice_last(start, len)?;
        Ok(self.tape.push(y, Op::SliceLast { x: self.id, start }))
    }

    pub fn concat_last(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let y = self.value().concat_last(&rhs.value())?;
        Ok(self.tape.push(y, Op::ConcatLast(self.id, rhs.id)))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range {}", x.len()),
            ));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let y = DenseArray::new(shape, data)?;
        Ok(self.tape.push(y, Op::Gather { x: self.id, index }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let y = self.value().transpose()?;
        Ok(self.tape.push(y, Op::Transpose(self.id)))
    }

    /// Vector `[n]` to diagonal matrix `[n, n]`.
    pub fn diag_embed(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 1 {
            return Err(Error::invalid(
                "diag_embed",
                format!("expected a vector, got {:?}", x.shape()),
            ));
        }
        Ok(self.tape.push(DenseArray::diag(x.data()), Op::DiagEmbed(self.id)))
    }

    /// Traces of a stack of square matrices `[b, n, n] → [b]`.
    pub fn batch_trace(self) -> Result<Var<'t>> {
        let x = self.value();
        let [b, n, n2] = *x.shape() else {
            return Err(Error::invalid(
                "batch_trace",
                format!("expected [b, n, n], got {:?}", x.shape()),
            ));
        };
        if n != n2 {
            return Err(Error::invalid("batch_trace", format!("matrices are {n}×{n2}")));
        }
        let t = (0..b)
            .map(|m| (0..n).map(|i| x.data()[m * n * n + i * n + i]).sum())
            .collect();
        Ok(self.tape.push(DenseArray::new(&[b], t)?, Op::BatchTrace(self.id)))
    }

    /// Matrix exponential of every matrix in a `[b, n, n]` stack. The
    /// reverse pass differentiates the evaluated truncated series.
    pub fn batch_matexp(self, eps: f64) -> Result<(Var<'t>, Vec<SeriesStats>)> {
        self.batch_series(eps, SeriesKind::Exp)
    }

    /// `Σ Vⁱ/(i+1)!` for every matrix in a `[b, t, t]` stack.
    pub fn batch_lowrank_series(self, eps: f64) -> Result<(Var<'t>, Vec<SeriesStats>)> {
        self.batch_series(eps, SeriesKind::LowRank)
    }

    fn batch_series(self, eps: f64, kind: SeriesKind) -> Result<(Var<'t>, Vec<SeriesStats>)> {
        if !(eps > 0.0) {
            return Err(Error::invalid(
                "matexp",
                format!("tolerance must be positive, got {eps}"),
            ));
        }
        let x = self.value();
        let [b, n, n2] = *x.shape() else {
            return Err(Error::invalid(
                "matexp",
                format!("expected [b, n, n], got {:?}", x.shape()),
            ));
        };
        if n != n2 {
            return Err(Error::invalid("matexp", format!("matrices are {n}×{n2}")));
        }
        let keep = self.tape.record;
        let mut out = Vec::with_capacity(x.len());
        let mut stats = Vec::with_capacity(b);
        let mut traces = Vec::new();
        for m in 0..b {
            let (e, st, tr) = series_forward(&x.data()[m * n * n..(m + 1) * n * n], n, eps, kind, keep)?;
            out.extend(e);
            stats.push(st);
            traces.extend(tr);
        }
        let y = DenseArray::new(x.shape(), out)?;
        Ok((self.tape.push(y, Op::Series { x: self.id, traces }), stats))
    }

    /// Matrix exponential of a single matrix, recorded as ordinary tape
    /// operations: scalings, products and sums, then the squarings. The
    /// squaring count and the number of terms are fixed by the forward
    /// values.
    pub fn matexp(self, eps: f64) -> Result<(Var<'t>, SeriesStats)> {
        let w = self.value();
        let n = w.require_square("matexp")?;
        if !w.all_finite() {
            return Err(Error::NonFinite { op: "matexp" });
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(
                "matexp",
                format!("tolerance must be positive, got {eps}"),
            ));
        }
        let s = crate::matexp::squaring_count(w.norm1());
        let scaled = self.scale(0.5f64.powi(s as i32));
        let mut x = self.tape.constant(DenseArray::identity(n));
        let mut y = scaled;
        let mut k = 2u32;
        while y.value().norm1() > eps {
            x = x.add(y)?;
            y = scaled.matmul(y)?.scale(1.0 / f64::from(k));
            k += 1;
        }
        for _ in 0..s {
            x = x.matmul(x)?;
        }
        Ok((x, SeriesStats { s, k }))
    }

    /// `log |det M|` of a square matrix via LU, as a one-element array.
    pub fn logabsdet(self) -> Result<Var<'t>> {
        let m = self.value();
        let lu = crate::linalg::Lu::factor(&m)?;
        lu.check_invertible("logabsdet")?;
        let inv_t = lu.inverse()?.transpose()?;
        Ok(self.tape.push(
            DenseArray::scalar(lu.log_abs_det()),
            Op::LogAbsDet { x: self.id, inv_t },
        ))
    }
}
