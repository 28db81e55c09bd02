//! Forward and backward kernels on plain tensors.
//!
//! Every function here is pure: inputs are borrowed immutably and a fresh
//! output is returned. The autograd tape and the eager executor both call
//! into these kernels, so a forward computed either way is bit-identical.
//!
//! Convolutions use a patch-matrix (im2col) expansion followed by a blocked
//! GEMM; depthwise convolutions use direct loops. Reductions run in a fixed
//! order: for each output element the taps are visited channel-major, then
//! kernel row, then kernel column, and per-sample weight gradients are summed
//! in batch order. Parallelism is only ever across independent outputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Stride, zero padding and channel grouping of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(k: usize, groups: usize) -> Self {
        ConvGeom::new(1, k / 2, groups)
    }
}

/// A convolution layer's learnable tensors plus its geometry.
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    /// `(C_out, C_in / groups, k, k)`.
    pub weight: Tensor<T>,
    /// `(1, C_out, 1, 1)` when present.
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding, self.groups)
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.weight, p.bias.as_ref(), p.geom())
}

/// Per-channel spatial convolution; requires `groups == C_in == C_out`.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let c = x.shape().c;
    if p.groups != c || p.weight.shape().n != c {
        return Err(Error::Config(format!(
            "depthwise convolution needs groups = C_in = C_out, got groups {} for input {} and weight {}",
            p.groups,
            x.shape(),
            p.weight.shape()
        )));
    }
    conv2d(x, p)
}

#[derive(Clone, Copy, Debug)]
struct ConvPlan {
    x: Shape,
    out: Shape,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvPlan {
    fn new(x: Shape, w: Shape, bias: Option<Shape>, g: ConvGeom) -> Result<Self> {
        if g.stride == 0 || g.groups == 0 {
            return Err(Error::Config("stride and groups must be positive".into()));
        }
        if w.h != w.w {
            return Err(Error::Shape(format!("non-square kernel {w}")));
        }
        if !x.c.is_multiple_of(g.groups) || !w.n.is_multiple_of(g.groups) || w.c * g.groups != x.c {
            return Err(Error::Config(format!(
                "input {x} does not match weight {w} with {} groups",
                g.groups
            )));
        }
        if let Some(b) = bias {
            if b != Shape::new(1, w.n, 1, 1) {
                return Err(Error::Shape(format!("bias {b} does not match weight {w}")));
            }
        }
        let k = w.h;
        let (hp, wp) = (x.h + 2 * g.padding, x.w + 2 * g.padding);
        if hp < k || wp < k {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {x} (padding {})",
                g.padding
            )));
        }
        let out = Shape::new(x.n, w.n, (hp - k) / g.stride + 1, (wp - k) / g.stride + 1);
        Ok(ConvPlan {
            x,
            out,
            k,
            stride: g.stride,
            pad: g.padding,
            groups: g.groups,
            cin_g: w.c,
            cout_g: w.n / g.groups,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Expand the channels of group `g` of one sample into a
    /// `(cin_g * k * k) x (H_out * W_out)` patch matrix.
    fn im2col<T: Real>(&self, xs: &[T], g: usize, cols: &mut [T]) {
        let (h, w) = (self.x.h as isize, self.x.w as isize);
        let (ho, wo) = (self.out.h, self.out.w);
        let k = self.k;
        let hw = self.x.plane();
        for ci in 0..self.cin_g {
            let plane = &xs[(g * self.cin_g + ci) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * w as usize..][..w as usize];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w { T::ZERO } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto the input planes of group `g`.
    fn col2im<T: Real>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let (h, w) = (self.x.h as isize, self.x.w as isize);
        let (ho, wo) = (self.out.h, self.out.w);
        let k = self.k;
        let hw = self.x.plane();
        for ci in 0..self.cin_g {
            let plane = &mut dx[(g * self.cin_g + ci) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w as usize..][..w as usize];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(x.shape(), weight.shape(), bias.map(|b| b.shape()), geom)?;
    let out_shape = plan.out;
    let mut out = Tensor::zeros(out_shape);
    let sample_len = out_shape.c * out_shape.plane();
    if sample_len == 0 {
        return Ok(out);
    }
    let wdata = weight.data();
    out.data_mut()
        .par_chunks_mut(sample_len)
        .enumerate()
        .for_each(|(n, o)| {
            let xs = x.sample(n);
            if plan.is_depthwise() {
                depthwise_forward_sample(&plan, xs, wdata, o);
            } else {
                gemm_forward_sample(&plan, xs, wdata, o);
            }
            if let Some(b) = bias {
                let hw = out_shape.plane();
                for (c, &bv) in b.data().iter().enumerate() {
                    for v in &mut o[c * hw..(c + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        });
    Ok(out)
}

fn gemm_forward_sample<T: Real>(plan: &ConvPlan, xs: &[T], w: &[T], o: &mut [T]) {
    let kk = plan.patch_len();
    let hwo = plan.out.plane();
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; kk * hwo]
    };
    for g in 0..plan.groups {
        let b: &[T] = if plan.is_pointwise() {
            &xs[g * plan.cin_g * hwo..(g + 1) * plan.cin_g * hwo]
        } else {
            plan.im2col(xs, g, &mut cols);
            &cols
        };
        let a = &w[g * plan.cout_g * kk..(g + 1) * plan.cout_g * kk];
        let c = &mut o[g * plan.cout_g * hwo..(g + 1) * plan.cout_g * hwo];
        T::gemm(
            plan.cout_g,
            kk,
            hwo,
            a,
            (kk as isize, 1),
            b,
            (hwo as isize, 1),
            T::ZERO,
            c,
            (hwo as isize, 1),
        );
    }
}

fn depthwise_forward_sample<T: Real>(plan: &ConvPlan, xs: &[T], w: &[T], o: &mut [T]) {
    let (h, wd) = (plan.x.h as isize, plan.x.w as isize);
    let (ho, wo) = (plan.out.h, plan.out.w);
    let k = plan.k;
    let hw = plan.x.plane();
    for c in 0..plan.out.c {
        let plane = &xs[c * hw..(c + 1) * hw];
        let kern = &w[c * k * k..(c + 1) * k * k];
        let dst = &mut o[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::ZERO;
                for ky in 0..k {
                    let iy = (oy * plan.stride + ky) as isize - plan.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * plan.stride + kx) as isize - plan.pad as isize;
                        if ix >= 0 && ix < wd {
                            acc += kern[ky * k + kx] * plane[(iy * wd + ix) as usize];
                        }
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
}

/// Gradients of a convolution with respect to the requested operands.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeom,
    dout: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let bias_shape = has_bias.then(|| Shape::new(1, weight.shape().n, 1, 1));
    let plan = ConvPlan::new(x.shape(), weight.shape(), bias_shape, geom)?;
    if dout.shape() != plan.out {
        return Err(Error::Shape(format!(
            "upstream gradient {} does not match conv output {}",
            dout.shape(),
            plan.out
        )));
    }
    let (need_dx, need_dw, need_db) = need;
    let hwo = plan.out.plane();
    let out_sample = plan.out.c * hwo;
    let wdata = weight.data();

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(plan.x);
        let in_sample = plan.x.c * plan.x.plane();
        if in_sample > 0 {
            dx.data_mut()
                .par_chunks_mut(in_sample)
                .enumerate()
                .for_each(|(n, dxs)| {
                    let ds = &dout.data()[n * out_sample..(n + 1) * out_sample];
                    if plan.is_depthwise() {
                        depthwise_dx_sample(&plan, ds, wdata, dxs);
                    } else {
                        gemm_dx_sample(&plan, ds, wdata, dxs);
                    }
                });
        }
        dx
    });

    let dweight = need_dw.then(|| {
        let partials: Vec<Vec<T>> = (0..plan.x.n)
            .into_par_iter()
            .map(|n| {
                let ds = &dout.data()[n * out_sample..(n + 1) * out_sample];
                let xs = x.sample(n);
                if plan.is_depthwise() {
                    depthwise_dw_sample(&plan, xs, ds)
                } else {
                    gemm_dw_sample(&plan, xs, ds)
                }
            })
            .collect();
        let mut dw = Tensor::zeros(weight.shape());
        for p in partials {
            for (a, b) in dw.data_mut().iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });

    let dbias = (has_bias && need_db).then(|| {
        let mut db = Tensor::zeros(Shape::new(1, plan.out.c, 1, 1));
        for n in 0..plan.out.n {
            for c in 0..plan.out.c {
                let s: T = dout.data()[(n * plan.out.c + c) * hwo..][..hwo].iter().copied().sum();
                db.data_mut()[c] += s;
            }
        }
        db
    });

    Ok(ConvGrads { dx, dweight, dbias })
}

fn gemm_dx_sample<T: Real>(plan: &ConvPlan, ds: &[T], w: &[T], dxs: &mut [T]) {
    let kk = plan.patch_len();
    let hwo = plan.out.plane();
    let mut dcols = vec![T::ZERO; kk * hwo];
    for g in 0..plan.groups {
        let a = &w[g * plan.cout_g * kk..(g + 1) * plan.cout_g * kk];
        let b = &ds[g * plan.cout_g * hwo..(g + 1) * plan.cout_g * hwo];
        if plan.is_pointwise() {
            let c = &mut dxs[g * plan.cin_g * hwo..(g + 1) * plan.cin_g * hwo];
            T::gemm(
                kk,
                plan.cout_g,
                hwo,
                a,
                (1, kk as isize),
                b,
                (hwo as isize, 1),
                T::ZERO,
                c,
                (hwo as isize, 1),
            );
        } else {
            T::gemm(
                kk,
                plan.cout_g,
                hwo,
                a,
                (1, kk as isize),
                b,
                (hwo as isize, 1),
                T::ZERO,
                &mut dcols,
                (hwo as isize, 1),
            );
            plan.col2im(&dcols, g, dxs);
        }
    }
}

fn gemm_dw_sample<T: Real>(plan: &ConvPlan, xs: &[T], ds: &[T]) -> Vec<T> {
    let kk = plan.patch_len();
    let hwo = plan.out.plane();
    let mut dw = vec![T::ZERO; plan.out.c * kk];
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; kk * hwo]
    };
    for g in 0..plan.groups {
        let b: &[T] = if plan.is_pointwise() {
            &xs[g * plan.cin_g * hwo..(g + 1) * plan.cin_g * hwo]
        } else {
            plan.im2col(xs, g, &mut cols);
            &cols
        };
        let a = &ds[g * plan.cout_g * hwo..(g + 1) * plan.cout_g * hwo];
        let c = &mut dw[g * plan.cout_g * kk..(g + 1) * plan.cout_g * kk];
        T::gemm(
            plan.cout_g,
            hwo,
            kk,
            a,
            (hwo as isize, 1),
            b,
            (1, hwo as isize),
            T::ZERO,
            c,
            (kk as isize, 1),
        );
    }
    dw
}

fn depthwise_dx_sample<T: Real>(plan: &ConvPlan, ds: &[T], w: &[T], dxs: &mut [T]) {
    let (h, wd) = (plan.x.h as isize, plan.x.w as isize);
    let (ho, wo) = (plan.out.h, plan.out.w);
    let k = plan.k;
    let hw = plan.x.plane();
    for c in 0..plan.out.c {
        let plane = &mut dxs[c * hw..(c + 1) * hw];
        let kern = &w[c * k * k..(c + 1) * k * k];
        let src = &ds[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox];
                for ky in 0..k {
                    let iy = (oy * plan.stride + ky) as isize - plan.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * plan.stride + kx) as isize - plan.pad as isize;
                        if ix >= 0 && ix < wd {
                            plane[(iy * wd + ix) as usize] += kern[ky * k + kx] * g;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_dw_sample<T: Real>(plan: &ConvPlan, xs: &[T], ds: &[T]) -> Vec<T> {
    let (h, wd) = (plan.x.h as isize, plan.x.w as isize);
    let (ho, wo) = (plan.out.h, plan.out.w);
    let k = plan.k;
    let hw = plan.x.plane();
    let mut dw = vec![T::ZERO; plan.out.c * k * k];
    for c in 0..plan.out.c {
        let plane = &xs[c * hw..(c + 1) * hw];
        let src = &ds[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = T::ZERO;
                for oy in 0..ho {
                    let iy = (oy * plan.stride + ky) as isize - plan.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * plan.stride + kx) as isize - plan.pad as isize;
                        if ix >= 0 && ix < wd {
                            acc += src[oy * wo + ox] * plane[(iy * wd + ix) as usize];
                        }
                    }
                }
                dw[(c * k + ky) * k + kx] = acc;
            }
        }
    }
    dw
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
}

pub fn apply_unary<T: Real>(x: &Tensor<T>, kind: Unary) -> Tensor<T> {
    match kind {
        Unary::Relu => x.map(|v| if v > T::ZERO { v } else { T::ZERO }),
        Unary::Sigmoid => x.map(|v| {
            // Branch on sign so neither side overflows exp.
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        }),
    }
}

/// `x` is the unary input, `y` its output.
pub fn unary_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, kind: Unary, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    match kind {
        Unary::Relu => {
            for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v <= T::ZERO {
                    *d = T::ZERO;
                }
            }
        }
        Unary::Sigmoid => {
            for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= s * (T::ONE - s);
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Windowed reduction without padding. For max pooling the returned vector
/// holds, per output element, the flat input index of the first maximum in
/// row-major window order.
pub fn pool2d<T: Real>(
    x: &Tensor<T>,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let s = x.shape();
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("pool kernel and stride must be positive".into()));
    }
    if kernel > s.h || kernel > s.w {
        return Err(Error::Config(format!("pool kernel {kernel} larger than input {s}")));
    }
    let (ho, wo) = ((s.h - kernel) / stride + 1, (s.w - kernel) / stride + 1);
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = (mode == PoolMode::Max).then(|| vec![0usize; out_shape.numel()]);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let xd = x.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                match mode {
                    PoolMode::Avg => {
                        let mut acc = T::ZERO;
                        for ky in 0..kernel {
                            let row = base + (oy * stride + ky) * s.w + ox * stride;
                            for v in &xd[row..row + kernel] {
                                acc += *v;
                            }
                        }
                        out.data_mut()[o] = acc * inv;
                    }
                    PoolMode::Max => {
                        let mut best = base + oy * stride * s.w + ox * stride;
                        for ky in 0..kernel {
                            let row = base + (oy * stride + ky) * s.w + ox * stride;
                            for idx in row..row + kernel {
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.data_mut()[o] = xd[best];
                        argmax.as_mut().unwrap()[o] = best;
                    }
                }
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn pool2d_backward<T: Real>(
    x_shape: Shape,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
    argmax: Option<&[usize]>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    match mode {
        PoolMode::Max => {
            let argmax = argmax.expect("max pooling backward needs argmax indices");
            for (&idx, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[idx] += g;
            }
        }
        PoolMode::Avg => {
            let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
            let (ho, wo) = (dy.shape().h, dy.shape().w);
            let s = x_shape;
            let mut o = 0;
            for nc in 0..s.n * s.c {
                let base = nc * s.plane();
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = dy.data()[o] * inv;
                        for ky in 0..kernel {
                            let row = base + (oy * stride + ky) * s.w + ox * stride;
                            for v in &mut dx.data_mut()[row..row + kernel] {
                                *v += g;
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::Shape(format!("global pooling of empty map {s}")));
    }
    let inv = T::from_f64(1.0 / s.plane() as f64);
    let data = x
        .data()
        .chunks_exact(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Real>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::from_f64(1.0 / x_shape.plane() as f64);
    let mut dx = Tensor::zeros(x_shape);
    for (p, &g) in dx.data_mut().chunks_exact_mut(x_shape.plane()).zip(dy.data()) {
        p.fill(g * inv);
    }
    dx
}

pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let s = x.shape();
    let out = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    Ok(Tensor::from_fn(out, |n, c, h, w| x.at(n, c, h / factor, w / factor)))
}

pub fn upsample_nearest_backward<T: Real>(x_shape: Shape, factor: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let ys = dy.shape();
    for n in 0..ys.n {
        for c in 0..ys.c {
            for h in 0..ys.h {
                for w in 0..ys.w {
                    let i = x_shape.index(n, c, h / factor, w / factor);
                    dx.data_mut()[i] += dy.at(n, c, h, w);
                }
            }
        }
    }
    dx
}

/// `(N, C·r², H, W) -> (N, C, rH, rW)` with
/// `out[n][c][h·r + i][w·r + j] = in[n][c·r² + i·r + j][h][w]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::Config(format!(
            "pixel shuffle needs channels divisible by r² = {}, got {s}",
            r * r
        )));
    }
    let out = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    Ok(Tensor::from_fn(out, |n, c, y, x_| {
        x.at(n, c * r * r + (y % r) * r + x_ % r, y / r, x_ / r)
    }))
}

/// Inverse of [`pixel_shuffle`].
pub fn space_to_depth<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::Config(format!(
            "space-to-depth needs extents divisible by {r}, got {s}"
        )));
    }
    let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    Ok(Tensor::from_fn(out, |n, c, h, w| {
        let (base, off) = (c / (r * r), c % (r * r));
        x.at(n, base, h * r + off / r, w * r + off % r)
    }))
}

pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concatenation of zero tensors".into()))?
        .shape();
    let bad: Vec<usize> = xs
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let s = t.shape();
            (s.n, s.h, s.w) != (first.n, first.h, first.w)
        })
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Shape(format!(
            "concatenation inputs {bad:?} differ from input 0 {first} in batch or spatial extent"
        )));
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let out = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..first.n {
        for t in xs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::from_vec(out, data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::Shape(format!(
            "channel slice [{start}, {}) out of range for {s}",
            start + len
        )));
    }
    let out = Shape::new(s.n, len, s.h, s.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        data.extend_from_slice(&x.sample(n)[start * s.plane()..(start + len) * s.plane()]);
    }
    Tensor::from_vec(out, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

fn broadcast_ok(x: Shape, y: Shape) -> bool {
    x == y || y == Shape::new(x.n, x.c, 1, 1)
}

/// Elementwise add/mul; `y` may be a `(N, C, 1, 1)` channel vector broadcast
/// over the spatial extent of `x`.
pub fn binary<T: Real>(x: &Tensor<T>, y: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    let (xs, ys) = (x.shape(), y.shape());
    if !broadcast_ok(xs, ys) {
        return Err(Error::Shape(format!(
            "cannot combine {xs} with {ys}: shapes must match or the second must be a channel vector"
        )));
    }
    let f = |a: T, b: T| match op {
        Binary::Add => a + b,
        Binary::Mul => a * b,
    };
    let data = if xs == ys {
        x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect()
    } else {
        let hw = xs.plane();
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, y.data()[i / hw]))
            .collect()
    };
    Tensor::from_vec(xs, data)
}

/// Gradients of [`binary`] for both operands, summing over broadcast axes.
pub fn binary_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, op: Binary, dz: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (xs, ys) = (x.shape(), y.shape());
    let hw = xs.plane();
    let ybro = |i: usize| if xs == ys { i } else { i / hw };
    let dx = match op {
        Binary::Add => dz.clone(),
        Binary::Mul => {
            let data = dz
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * y.data()[ybro(i)])
                .collect();
            Tensor::from_vec(xs, data).unwrap()
        }
    };
    let mut dy = Tensor::zeros(ys);
    {
        let dyd = dy.data_mut();
        for (i, &g) in dz.data().iter().enumerate() {
            dyd[ybro(i)] += match op {
                Binary::Add => g,
                Binary::Mul => g * x.data()[i],
            };
        }
    }
    (dx, dy)
}

/// Edge padding amounts `(top, bottom, left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pad4 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Pad by repeating edge pixels.
pub fn pad_replicate<T: Real>(x: &Tensor<T>, p: Pad4) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::Shape(format!("cannot edge-pad empty map {s}")));
    }
    let out = Shape::new(s.n, s.c, s.h + p.top + p.bottom, s.w + p.left + p.right);
    Ok(Tensor::from_fn(out, |n, c, h, w| {
        let ih = h.saturating_sub(p.top).min(s.h - 1);
        let iw = w.saturating_sub(p.left).min(s.w - 1);
        x.at(n, c, ih, iw)
    }))
}

pub fn pad_replicate_backward<T: Real>(x_shape: Shape, p: Pad4, dy: &Tensor<T>) -> Tensor<T> {
    let s = x_shape;
    let ys = dy.shape();
    let mut dx = Tensor::zeros(s);
    for n in 0..ys.n {
        for c in 0..ys.c {
            for h in 0..ys.h {
                let ih = h.saturating_sub(p.top).min(s.h - 1);
                for w in 0..ys.w {
                    let iw = w.saturating_sub(p.left).min(s.w - 1);
                    dx.data_mut()[s.index(n, c, ih, iw)] += dy.at(n, c, h, w);
                }
            }
        }
    }
    dx
}

/// Spatial window `[top, top + h) x [left, left + w)`.
pub fn crop<T: Real>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if top + h > s.h || left + w > s.w {
        return Err(Error::Shape(format!("crop {h}x{w} at ({top}, {left}) exceeds {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x_| {
        x.at(n, c, y + top, x_ + left)
    }))
}

pub fn crop_backward<T: Real>(x_shape: Shape, top: usize, left: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let ys = dy.shape();
    for n in 0..ys.n {
        for c in 0..ys.c {
            for h in 0..ys.h {
                for w in 0..ys.w {
                    dx.data_mut()[x_shape.index(n, c, h + top, w + left)] = dy.at(n, c, h, w);
                }
            }
        }
    }
    dx
}

/// Mean absolute error, returned as a one-element tensor.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "L1 loss between {} and {}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel().max(1);
    let s: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(Tensor::scalar(s / T::from_f64(n as f64)))
}

/// Gradient with respect to `pred`; the subgradient at a tie is zero.
pub fn l1_loss_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, dloss: T) -> Tensor<T> {
    let scale = dloss / T::from_f64(pred.numel().max(1) as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            if a > b {
                scale
            } else if a < b {
                -scale
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data).unwrap()
}
