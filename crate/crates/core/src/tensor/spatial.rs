//! Per-pixel and neighbourhood ops: channel softmax, bilinear resize, 3×3 mean pool.

use super::graph::{GradSink, Op};
use super::{dims4, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Source taps of one output coordinate under the align-corners=false convention.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w1: T,
}

fn taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                w1: T::of(src - i0 as f64),
            }
        })
        .collect()
}

/// Bilinear resize of plain NCHW values.
pub fn resize_values<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("bilinear_resize", x.shape())?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize", "spatial", "sizes must be positive"));
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let (r0, r1) = (&plane[ry.i0 * w..(ry.i0 + 1) * w], &plane[ry.i1 * w..(ry.i1 + 1) * w]);
            let wy0 = T::one() - ry.w1;
            for (ox, rx) in tx.iter().enumerate() {
                let wx0 = T::one() - rx.w1;
                let top = r0[rx.i0] * wx0 + r0[rx.i1] * rx.w1;
                let bot = r1[rx.i0] * wx0 + r1[rx.i1] * rx.w1;
                dst[oy * out_w + ox] = top * wy0 + bot * ry.w1;
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Per-pixel softmax over channels of plain NCHW values.
pub fn softmax_values<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("softmax_channels", x.shape())?;
    if c == 0 {
        return Err(Error::shape("softmax_channels", "C", "need at least one channel"));
    }
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * hw + p] - m).exp();
                out[base + ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean over the in-bounds part of each 3×3 neighbourhood, stride 1.
pub fn avg_pool3_values<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("avg_pool_3x3_same", x.shape())?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let mut s = T::zero();
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        s += plane[yy * w + xx];
                    }
                }
                dst[y * w + x] = s / T::of(((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let value = softmax_values(self.value(input))?;
        Ok(self.push(value, Op::Softmax { input }, &[input]))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = resize_values(self.value(input), out_h, out_w)?;
        Ok(self.push(value, Op::Resize { input }, &[input]))
    }

    pub fn avg_pool_3x3_same(&mut self, input: Var) -> Result<Var> {
        let value = avg_pool3_values(self.value(input))?;
        Ok(self.push(value, Op::AvgPool3 { input }, &[input]))
    }
}

pub(crate) fn softmax_backward<T: Scalar>(input: Var, y: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(input) {
        return;
    }
    let (n, c, h, w) = dims4("softmax_channels", y.shape()).expect("validated in forward");
    let hw = h * w;
    let yd = y.data();
    let mut dx = vec![T::zero(); yd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += g[i] * yd[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] = yd[i] * (g[i] - dot);
            }
        }
    }
    sink.add(input, dx);
}

pub(crate) fn resize_backward<T: Scalar>(
    input: Var,
    x: &Tensor<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let (n, c, h, w) = dims4("bilinear_resize", x.shape()).expect("validated in forward");
    let (_, _, out_h, out_w) = dims4("bilinear_resize", out.shape()).expect("validated in forward");
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut dx = vec![T::zero(); x.numel()];
    for p in 0..n * c {
        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
        let gplane = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let wy0 = T::one() - ry.w1;
            for (ox, rx) in tx.iter().enumerate() {
                let gv = gplane[oy * out_w + ox];
                let wx0 = T::one() - rx.w1;
                dplane[ry.i0 * w + rx.i0] += gv * wy0 * wx0;
                dplane[ry.i0 * w + rx.i1] += gv * wy0 * rx.w1;
                dplane[ry.i1 * w + rx.i0] += gv * ry.w1 * wx0;
                dplane[ry.i1 * w + rx.i1] += gv * ry.w1 * rx.w1;
            }
        }
    }
    sink.add(input, dx);
}

pub(crate) fn avg_pool3_backward<T: Scalar>(input: Var, x: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(input) {
        return;
    }
    let (n, c, h, w) = dims4("avg_pool_3x3_same", x.shape()).expect("validated in forward");
    let mut dx = vec![T::zero(); x.numel()];
    for p in 0..n * c {
        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
        let gplane = &g[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let share = gplane[y * w + x] / T::of(((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        dplane[yy * w + xx] += share;
                    }
                }
            }
        }
    }
    sink.add(input, dx);
}
