//! Reverse-mode differentiation over a linear tape.
//!
//! Operations are recorded in execution order, so the recording order is
//! already a topological order and backward is a single reverse sweep.
//! [`Graph`] abstracts over "record onto a tape" and "just compute", which
//! lets the network be written once and run either way.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, Binary, ConvGeom, Pad4, PoolMode, Unary};
use crate::tensor::{Real, Shape, Tensor};

/// Execution context for the network graph.
pub trait Graph<T: Real> {
    type V: Clone;

    /// A learnable tensor (gradient tracked when recording).
    fn param(&self, t: Tensor<T>) -> Self::V;
    /// A constant input (never differentiated).
    fn input(&self, t: Tensor<T>) -> Self::V;
    fn shape(&self, v: &Self::V) -> Shape;
    fn value(&self, v: &Self::V) -> Tensor<T>;

    fn conv2d(&self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, geom: ConvGeom) -> Result<Self::V>;
    fn unary(&self, x: &Self::V, kind: Unary) -> Self::V;
    fn pool2d(&self, x: &Self::V, mode: PoolMode, kernel: usize, stride: usize) -> Result<Self::V>;
    fn global_avg_pool(&self, x: &Self::V) -> Result<Self::V>;
    fn upsample_nearest(&self, x: &Self::V, factor: usize) -> Result<Self::V>;
    fn pixel_shuffle(&self, x: &Self::V, r: usize) -> Result<Self::V>;
    fn concat_channels(&self, xs: &[&Self::V]) -> Result<Self::V>;
    fn binary(&self, x: &Self::V, y: &Self::V, op: Binary) -> Result<Self::V>;
    fn pad_replicate(&self, x: &Self::V, pad: Pad4) -> Result<Self::V>;
    fn crop(&self, x: &Self::V, top: usize, left: usize, h: usize, w: usize) -> Result<Self::V>;

    fn relu(&self, x: &Self::V) -> Self::V {
        self.unary(x, Unary::Relu)
    }
    fn sigmoid(&self, x: &Self::V) -> Self::V {
        self.unary(x, Unary::Sigmoid)
    }
    fn add(&self, x: &Self::V, y: &Self::V) -> Result<Self::V> {
        self.binary(x, y, Binary::Add)
    }
    fn mul(&self, x: &Self::V, y: &Self::V) -> Result<Self::V> {
        self.binary(x, y, Binary::Mul)
    }
}

/// Computes values directly; intermediates are dropped as soon as the
/// caller releases them.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type V = Tensor<T>;

    fn param(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn input(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn shape(&self, v: &Tensor<T>) -> Shape {
        v.shape()
    }
    fn value(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }
    fn conv2d(&self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, w, b, geom)
    }
    fn unary(&self, x: &Tensor<T>, kind: Unary) -> Tensor<T> {
        ops::apply_unary(x, kind)
    }
    fn pool2d(&self, x: &Tensor<T>, mode: PoolMode, kernel: usize, stride: usize) -> Result<Tensor<T>> {
        Ok(ops::pool2d(x, mode, kernel, stride)?.0)
    }
    fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x)
    }
    fn upsample_nearest(&self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        ops::upsample_nearest(x, factor)
    }
    fn pixel_shuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        ops::pixel_shuffle(x, r)
    }
    fn concat_channels(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ops::concat_channels(xs)
    }
    fn binary(&self, x: &Tensor<T>, y: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
        ops::binary(x, y, op)
    }
    fn pad_replicate(&self, x: &Tensor<T>, pad: Pad4) -> Result<Tensor<T>> {
        ops::pad_replicate(x, pad)
    }
    fn crop(&self, x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        ops::crop(x, top, left, h, w)
    }
}

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    Pool {
        x: usize,
        mode: PoolMode,
        kernel: usize,
        stride: usize,
        argmax: Option<Vec<usize>>,
    },
    GlobalAvg {
        x: usize,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    SpaceToDepth {
        x: usize,
        r: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    Binary {
        x: usize,
        y: usize,
        op: Binary,
    },
    Pad {
        x: usize,
        pad: Pad4,
    },
    Crop {
        x: usize,
        top: usize,
        left: usize,
    },
    Sum {
        x: usize,
    },
    L1 {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records operations for one backward pass. Each tape may be differentiated
/// exactly once.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients<T> {
    tape_id: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Leaves that require
    /// gradients but were not reached receive zeros; constants yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.tape_id, self.tape_id, "variable belongs to a different tape");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape_id, self.id, "variable belongs to a different tape");
        v.index
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape_id: self.id,
            index: nodes.len() - 1,
        }
    }

    fn any_grad(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, inputs: &[usize], f: impl FnOnce(&[Node<T>]) -> Result<(Tensor<T>, Op)>) -> Result<Var> {
        let (value, op) = f(&self.nodes.borrow())?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[self.idx(&v)].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[self.idx(&v)].value)
    }

    pub fn space_to_depth(&self, x: Var, r: usize) -> Result<Var> {
        let xi = self.idx(&x);
        self.record(&[xi], |n| {
            Ok((ops::space_to_depth(&n[xi].value, r)?, Op::SpaceToDepth { x: xi, r }))
        })
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(&x);
        self.record(&[xi], |n| {
            Ok((
                ops::slice_channels(&n[xi].value, start, len)?,
                Op::Slice { x: xi, start },
            ))
        })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self, x: Var) -> Var {
        let xi = self.idx(&x);
        self.record(&[xi], |n| Ok((Tensor::scalar(n[xi].value.sum()), Op::Sum { x: xi })))
            .expect("sum cannot fail")
    }

    pub fn l1_loss(&self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.idx(&pred), self.idx(&target));
        self.record(&[p, t], |n| {
            Ok((ops::l1_loss(&n[p].value, &n[t].value)?, Op::L1 { pred: p, target: t }))
        })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        let li = self.idx(&loss);
        let nodes = self.nodes.borrow();
        if nodes[li].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a one-element loss, got {}",
                nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[li].requires_grad {
            grads[li] = Some(Tensor::full(nodes[li].value.shape(), T::ONE));
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |j: usize, d: Tensor<T>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(e) => e.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let need = (
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                        b.is_some_and(|b| nodes[b].requires_grad),
                    );
                    let cg = ops::conv2d_backward(&nodes[*x].value, &nodes[*w].value, b.is_some(), *geom, &g, need)?;
                    if let Some(d) = cg.dx {
                        acc(*x, d);
                    }
                    if let Some(d) = cg.dweight {
                        acc(*w, d);
                    }
                    if let (Some(b), Some(d)) = (b, cg.dbias) {
                        acc(*b, d);
                    }
                }
                Op::Unary { x, kind } => {
                    acc(*x, ops::unary_backward(&nodes[*x].value, &node.value, *kind, &g));
                }
                Op::Pool {
                    x,
                    mode,
                    kernel,
                    stride,
                    argmax,
                } => {
                    acc(
                        *x,
                        ops::pool2d_backward(nodes[*x].value.shape(), *mode, *kernel, *stride, argmax.as_deref(), &g),
                    );
                }
                Op::GlobalAvg { x } => acc(*x, ops::global_avg_pool_backward(nodes[*x].value.shape(), &g)),
                Op::Upsample { x, factor } => {
                    acc(*x, ops::upsample_nearest_backward(nodes[*x].value.shape(), *factor, &g));
                }
                Op::PixelShuffle { x, r } => acc(*x, ops::space_to_depth(&g, *r)?),
                Op::SpaceToDepth { x, r } => acc(*x, ops::pixel_shuffle(&g, *r)?),
                Op::Concat { xs } => {
                    let mut start = 0;
                    for &j in xs {
                        let c = nodes[j].value.shape().c;
                        if nodes[j].requires_grad {
                            acc(j, ops::slice_channels(&g, start, c)?);
                        }
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let xs = nodes[*x].value.shape();
                    let mut d = Tensor::zeros(xs);
                    let len = g.shape().c * xs.plane();
                    for n in 0..xs.n {
                        let off = (n * xs.c + start) * xs.plane();
                        d.data_mut()[off..off + len].copy_from_slice(g.sample(n));
                    }
                    acc(*x, d);
                }
                Op::Binary { x, y, op } => {
                    let (dx, dy) = ops::binary_backward(&nodes[*x].value, &nodes[*y].value, *op, &g);
                    acc(*x, dx);
                    acc(*y, dy);
                }
                Op::Pad { x, pad } => acc(*x, ops::pad_replicate_backward(nodes[*x].value.shape(), *pad, &g)),
                Op::Crop { x, top, left } => acc(*x, ops::crop_backward(nodes[*x].value.shape(), *top, *left, &g)),
                Op::Sum { x } => acc(*x, Tensor::full(nodes[*x].value.shape(), g.item())),
                Op::L1 { pred, target } => {
                    let d = ops::l1_loss_backward(&nodes[*pred].value, &nodes[*target].value, g.item());
                    if nodes[*target].requires_grad {
                        acc(*target, d.map(|v| -v));
                    }
                    acc(*pred, d);
                }
            }
        }

        // Leaves that need gradients but were not reached get zeros.
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type V = Var;

    fn param(&self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }
    fn input(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }
    fn shape(&self, v: &Var) -> Shape {
        self.with_value(*v, |t| t.shape())
    }
    fn value(&self, v: &Var) -> Tensor<T> {
        Tape::value(self, *v)
    }

    fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.record(&inputs, |n| {
            let y = ops::conv2d_forward(&n[xi].value, &n[wi].value, bi.map(|b| &n[b].value), geom)?;
            Ok((
                y,
                Op::Conv {
                    x: xi,
                    w: wi,
                    b: bi,
                    geom,
                },
            ))
        })
    }

    fn unary(&self, x: &Var, kind: Unary) -> Var {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((ops::apply_unary(&n[xi].value, kind), Op::Unary { x: xi, kind }))
        })
        .expect("unary ops cannot fail")
    }

    fn pool2d(&self, x: &Var, mode: PoolMode, kernel: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            let (y, argmax) = ops::pool2d(&n[xi].value, mode, kernel, stride)?;
            Ok((
                y,
                Op::Pool {
                    x: xi,
                    mode,
                    kernel,
                    stride,
                    argmax,
                },
            ))
        })
    }

    fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((ops::global_avg_pool(&n[xi].value)?, Op::GlobalAvg { x: xi }))
        })
    }

    fn upsample_nearest(&self, x: &Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((
                ops::upsample_nearest(&n[xi].value, factor)?,
                Op::Upsample { x: xi, factor },
            ))
        })
    }

    fn pixel_shuffle(&self, x: &Var, r: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((ops::pixel_shuffle(&n[xi].value, r)?, Op::PixelShuffle { x: xi, r }))
        })
    }

    fn concat_channels(&self, xs: &[&Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|v| self.idx(v)).collect();
        self.record(&idx, |n| {
            let vals: Vec<&Tensor<T>> = idx.iter().map(|&i| &n[i].value).collect();
            Ok((ops::concat_channels(&vals)?, Op::Concat { xs: idx.clone() }))
        })
    }

    fn binary(&self, x: &Var, y: &Var, op: Binary) -> Result<Var> {
        let (xi, yi) = (self.idx(x), self.idx(y));
        self.record(&[xi, yi], |n| {
            Ok((
                ops::binary(&n[xi].value, &n[yi].value, op)?,
                Op::Binary { x: xi, y: yi, op },
            ))
        })
    }

    fn pad_replicate(&self, x: &Var, pad: Pad4) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((ops::pad_replicate(&n[xi].value, pad)?, Op::Pad { x: xi, pad }))
        })
    }

    fn crop(&self, x: &Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.record(&[xi], |n| {
            Ok((ops::crop(&n[xi].value, top, left, h, w)?, Op::Crop { x: xi, top, left }))
        })
    }
}
