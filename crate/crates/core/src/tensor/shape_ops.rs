//! Channel and batch rearrangements.

use super::graph::{GradSink, Node, Op};
use super::{dims4, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    /// Concatenate NC_iHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "parts", "no inputs"))?;
        let (n, _, h, w) = dims4("concat_channels", self.value(*first).shape())?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4("concat_channels", self.value(p).shape())?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    "N/H/W",
                    format!("{:?} vs {:?}", self.value(*first).shape(), self.value(p).shape()),
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Output channel `k` is input channel `index[k]`. Indices may repeat.
    pub fn gather_channels(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let (n, c, h, w) = dims4("gather_channels", self.value(input).shape())?;
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::shape(
                "gather_channels",
                "channel index",
                format!("{bad} out of range for {c} channels"),
            ));
        }
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * index.len() * hw);
        for b in 0..n {
            for &i in index {
                out.extend_from_slice(&src[(b * c + i) * hw..(b * c + i + 1) * hw]);
            }
        }
        let value = Tensor::new(vec![n, index.len(), h, w], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            &[input],
        ))
    }

    /// `[a_0, b_0, a_1, b_1, ..., a_{C-1}, b_{C-1}]` along channels.
    pub fn slice_interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ac, bc) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ac != bc {
            return Err(Error::shape("slice_interleave", "shape", format!("{ac:?} vs {bc:?}")));
        }
        let (_, c, _, _) = dims4("slice_interleave", &ac)?;
        let joined = self.concat_channels(&[a, b])?;
        let index: Vec<usize> = (0..c).flat_map(|i| [i, c + i]).collect();
        self.gather_channels(joined, &index)
    }

    /// Per-pixel maximum over channels, keeping a single channel.
    /// Ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("channel_max", self.value(input).shape())?;
        if c == 0 {
            return Err(Error::shape("channel_max", "C", "need at least one channel"));
        }
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0u32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if src[(b * c + ch) * hw + p] > src[(b * c + best) * hw + p] {
                        best = ch;
                    }
                }
                out[b * hw + p] = src[(b * c + best) * hw + p];
                argmax[b * hw + p] = best as u32;
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelMax { input, argmax }, &[input]))
    }

    /// Batch rows `start..start + len`.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow_batch(start, len)?;
        Ok(self.push(value, Op::Narrow { input, start }, &[input]))
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    parts: &[Var],
    nodes: &[Node<T>],
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (n, total_c, h, w) = dims4("concat_channels", out.shape()).expect("validated in forward");
    let hw = h * w;
    let mut offset = 0;
    for &p in parts {
        let pc = nodes[p.0].value.shape()[1];
        if sink.wants(p) {
            let mut gp = Vec::with_capacity(n * pc * hw);
            for b in 0..n {
                let start = (b * total_c + offset) * hw;
                gp.extend_from_slice(&g[start..start + pc * hw]);
            }
            sink.add(p, gp);
        }
        offset += pc;
    }
}

pub(crate) fn gather_backward<T: Scalar>(
    input: Var,
    x: &Tensor<T>,
    index: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let (n, c, h, w) = dims4("gather_channels", x.shape()).expect("validated in forward");
    let hw = h * w;
    let k = index.len();
    let dx = sink.slot(input);
    for b in 0..n {
        for (j, &i) in index.iter().enumerate() {
            let src = &g[(b * k + j) * hw..(b * k + j + 1) * hw];
            let dst = &mut dx[(b * c + i) * hw..(b * c + i + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

pub(crate) fn channel_max_backward<T: Scalar>(
    input: Var,
    x: &Tensor<T>,
    argmax: &[u32],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let (n, c, h, w) = dims4("channel_max", x.shape()).expect("validated in forward");
    let hw = h * w;
    let dx = sink.slot(input);
    for b in 0..n {
        for p in 0..hw {
            let ch = argmax[b * hw + p] as usize;
            dx[(b * c + ch) * hw + p] += g[b * hw + p];
        }
    }
}

pub(crate) fn narrow_backward<T: Scalar>(input: Var, x: &Tensor<T>, start: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(input) {
        return;
    }
    let per: usize = x.shape()[1..].iter().product();
    let dx = sink.slot(input);
    for (d, &s) in dx[start * per..start * per + g.len()].iter_mut().zip(g) {
        *d += s;
    }
}
