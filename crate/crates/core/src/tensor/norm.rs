//! Batch normalization over (N, H, W) per channel with momentum running buffers.

use serde::{Deserialize, Serialize};

use super::graph::{GradSink, Node, Op};
use super::{dims4, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normalize with batch statistics and update the running buffers.
    Train,
    /// Normalize with the running buffers; buffers are read-only.
    Eval,
}

/// Running statistics of one batch-norm layer.
///
/// The learnable scale and shift are ordinary parameters passed to
/// [`Graph::batch_norm`] alongside this state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Batch mean/variance seen by the most recent train-mode call.
    pub last_batch_mean: Option<Vec<T>>,
    pub last_batch_var: Option<Vec<T>>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: T, eps: T) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
            last_batch_mean: None,
            last_batch_var: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `buf <- (1 - rho) * buf + rho * batch`, the update applied in train mode.
    pub fn momentum_update(old: T, batch: T, rho: T) -> T {
        (T::one() - rho) * old + rho * batch
    }
}

pub(crate) struct BnSaved<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel biased mean and variance over N, H, W, accumulated in f64.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean[ch] = s / m;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            q += x[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
        var[ch] = q / m;
    }
    (mean, var)
}

impl<T: Scalar> Graph<T> {
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = dims4("batch_norm", x.shape())?;
        if c != state.channels() {
            return Err(Error::shape(
                "batch_norm",
                "channels",
                format!("input has {c}, state has {}", state.channels()),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    "affine",
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let (bm, bv) = channel_stats(x.data(), n, c, hw);
                if let Some(ch) = bv.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "batch_norm",
                        detail: format!("batch variance of channel {ch} is {}", bv[ch]),
                    });
                }
                let bm_t: Vec<T> = bm.iter().map(|&v| T::of(v)).collect();
                let bv_t: Vec<T> = bv.iter().map(|&v| T::of(v)).collect();
                let inv: Vec<T> = bv_t.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
                let rho = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = BatchNormState::momentum_update(state.running_mean[ch], bm_t[ch], rho);
                    state.running_var[ch] = BatchNormState::momentum_update(state.running_var[ch], bv_t[ch], rho);
                }
                state.last_batch_mean = Some(bm_t.clone());
                state.last_batch_var = Some(bv_t);
                (bm_t, inv)
            }
            Mode::Eval => (
                state.running_mean.clone(),
                state
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + state.eps).sqrt())
                    .collect(),
            ),
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let x = self.value(input).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm(BnSaved {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            }),
            &[input, gamma, beta],
        ))
    }
}

pub(crate) fn backward<T: Scalar>(saved: &BnSaved<T>, nodes: &[Node<T>], dy: &[T], sink: &mut GradSink<'_, T>) {
    let (n, c, h, w) = dims4("batch_norm", nodes[saved.input.0].value.shape()).expect("validated in forward");
    let hw = h * w;
    let m = (n * hw) as f64;
    let gamma = nodes[saved.gamma.0].value.data();
    let xhat = &saved.xhat;

    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sum_dy[ch] += dy[i].as_f64();
                sum_dy_xhat[ch] += (dy[i] * xhat[i]).as_f64();
            }
        }
    }
    if sink.wants(saved.gamma) {
        sink.add(saved.gamma, sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
    }
    if sink.wants(saved.beta) {
        sink.add(saved.beta, sum_dy.iter().map(|&v| T::of(v)).collect());
    }
    if !sink.wants(saved.input) {
        return;
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let gi = gamma[ch] * saved.inv_std[ch];
            if saved.batch_stats {
                let mean_dy = T::of(sum_dy[ch] / m);
                let mean_dy_xhat = T::of(sum_dy_xhat[ch] / m);
                for i in base..base + hw {
                    dx[i] = gi * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                }
            } else {
                for i in base..base + hw {
                    dx[i] = gi * dy[i];
                }
            }
        }
    }
    sink.add(saved.input, dx);
}
