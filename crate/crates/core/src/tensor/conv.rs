//! 2-D cross-correlation via im2col + GEMM, with grouped channels.

use super::graph::{GradSink, Node, Op};
use super::{dims4, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Stride, zero padding and channel groups of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    /// input channels per group
    cg: usize,
    /// output channels per group
    og: usize,
    spec: ConvSpec,
}

impl Geom {
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn kk(&self) -> usize {
        self.cg * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

pub(crate) struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geom,
}

fn geometry(input: &[usize], weight: &[usize], bias: Option<&[usize]>, spec: ConvSpec) -> Result<Geom> {
    let (n, c, h, w) = dims4("conv2d", input)?;
    let [o, wc, kh, kw] = *weight else {
        return Err(Error::shape(
            "conv2d",
            "weight rank",
            format!("expected OIkk, got {weight:?}"),
        ));
    };
    if spec.groups == 0 || spec.stride == 0 {
        return Err(Error::shape("conv2d", "groups/stride", "must be positive"));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", "kernel", format!("non-square kernel {kh}x{kw}")));
    }
    if c % spec.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            "in-channels",
            format!("{c} not divisible by groups={}", spec.groups),
        ));
    }
    if o % spec.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            "out-channels",
            format!("{o} not divisible by groups={}", spec.groups),
        ));
    }
    if wc != c / spec.groups {
        return Err(Error::shape(
            "conv2d",
            "weight in-channels",
            format!(
                "weight has {wc}, expected {} (= {c} / {})",
                c / spec.groups,
                spec.groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b != [o] {
            return Err(Error::shape("conv2d", "bias", format!("expected [{o}], got {b:?}")));
        }
    }
    let k = kh;
    if h + 2 * spec.padding < k || w + 2 * spec.padding < k {
        return Err(Error::shape(
            "conv2d",
            "spatial",
            format!("{h}x{w} with padding {} smaller than kernel {k}", spec.padding),
        ));
    }
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
    Ok(Geom {
        n,
        c,
        h,
        w,
        o,
        k,
        oh,
        ow,
        cg: c / spec.groups,
        og: o / spec.groups,
        spec,
    })
}

/// Unfold one group of one image (`cg` channels of `h*w`) into `kk × ohw` columns.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride as isize, g.spec.padding as isize);
    let ohw = g.ohw();
    for c in 0..g.cg {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride as isize, g.spec.padding as isize);
    let ohw = g.ohw();
    for c in 0..g.cg {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let ohw = g.ohw();
    let kk = g.kk();
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    for n in 0..g.n {
        for gi in 0..g.spec.groups {
            let xs = &x[(n * g.c + gi * g.cg) * g.h * g.w..(n * g.c + (gi + 1) * g.cg) * g.h * g.w];
            let cols_ref: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let wg = &weight[gi * g.og * kk..(gi + 1) * g.og * kk];
            let os = &mut out[(n * g.o + gi * g.og) * ohw..(n * g.o + (gi + 1) * g.og) * ohw];
            T::gemm(g.og, kk, ohw, wg, false, cols_ref, false, os, false);
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                for v in &mut out[(n * g.o + o) * ohw..(n * g.o + o + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Convolution on plain tensors, outside any graph.
pub fn conv2d_values<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
    let out = forward(input.data(), weight.data(), bias.map(|b| b.data()), &g);
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of an NCHW input with an `[O, C/groups, k, k]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = bias.map(|b| self.value(b));
        let g = geometry(x.shape(), wt.shape(), b.map(|b| b.shape()), spec)?;
        let out = forward(x.data(), wt.data(), b.map(|b| b.data()), &g);
        let value = Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d(ConvSaved {
                input,
                weight,
                bias,
                geom: g,
            }),
            &inputs,
        ))
    }
}

pub(crate) fn backward<T: Scalar>(saved: &ConvSaved, nodes: &[Node<T>], dy: &[T], sink: &mut GradSink<'_, T>) {
    let g = &saved.geom;
    let x = nodes[saved.input.0].value.data();
    let weight = nodes[saved.weight.0].value.data();
    let ohw = g.ohw();
    let kk = g.kk();
    let want_x = sink.wants(saved.input);
    let want_w = sink.wants(saved.weight);

    if let Some(b) = saved.bias {
        if sink.wants(b) {
            let mut db = vec![T::zero(); g.o];
            for n in 0..g.n {
                for (o, acc) in db.iter_mut().enumerate() {
                    let base = (n * g.o + o) * ohw;
                    *acc += dy[base..base + ohw].iter().copied().sum::<T>();
                }
            }
            sink.add(b, db);
        }
    }
    if !want_x && !want_w {
        return;
    }

    let mut dw = if want_w {
        vec![T::zero(); weight.len()]
    } else {
        Vec::new()
    };
    let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    let mut dcols = if g.pointwise() || !want_x {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };

    for n in 0..g.n {
        for gi in 0..g.spec.groups {
            let xr = (n * g.c + gi * g.cg) * g.h * g.w..(n * g.c + (gi + 1) * g.cg) * g.h * g.w;
            let dys = &dy[(n * g.o + gi * g.og) * ohw..(n * g.o + (gi + 1) * g.og) * ohw];
            let wr = gi * g.og * kk..(gi + 1) * g.og * kk;
            if want_w {
                let cols_ref: &[T] = if g.pointwise() {
                    &x[xr.clone()]
                } else {
                    im2col(&x[xr.clone()], g, &mut cols);
                    &cols
                };
                T::gemm(g.og, ohw, kk, dys, false, cols_ref, true, &mut dw[wr.clone()], true);
            }
            if want_x {
                let wg = &weight[wr];
                if g.pointwise() {
                    T::gemm(kk, g.og, ohw, wg, true, dys, false, &mut dx[xr], true);
                } else {
                    T::gemm(kk, g.og, ohw, wg, true, dys, false, &mut dcols, false);
                    col2im(&dcols, g, &mut dx[xr]);
                }
            }
        }
    }
    if want_w {
        sink.add(saved.weight, dw);
    }
    if want_x {
        sink.add(saved.input, dx);
    }
}
