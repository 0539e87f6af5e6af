//! Segmentation, boundary and duality losses, their weighted sum, and ramp-up schedules.
//!
//! Every loss is a fused kernel: value and gradient with respect to the
//! prediction are computed together in `f64` and attached to the graph with
//! [`Graph::scalar_fn`]. Targets (labels, pseudo-labels, boundary maps) are
//! plain data and never receive gradient.

use serde::{Deserialize, Serialize};

use crate::boundary_gt::IGNORE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

fn check_numel(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(
            op,
            "target",
            format!("{what} has {got} entries, prediction has {want}"),
        ));
    }
    Ok(())
}

/// Log-softmax over channels at one pixel, returned with the softmax.
fn pixel_softmax(x: &[f64], probs: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &v) in probs.iter_mut().zip(x) {
        *p = (v - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln()
}

/// Cross-entropy over non-ignore pixels accepted by `include`, normalized by `denom(count)`.
fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    op: &'static str,
    include: impl Fn(usize) -> bool,
    denom: impl FnOnce(usize) -> usize,
) -> Result<(Var, usize)> {
    let (n, c, h, w) = g.value(logits).dims4()?;
    let hw = h * w;
    check_numel(op, "labels", labels.len(), n * hw)?;
    let x = g.value(logits).data();
    let mut sel = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE || !include(i) {
            continue;
        }
        if l as usize >= c {
            return Err(Error::Data(format!("{op}: label {l} for {c} classes")));
        }
        sel.push(i);
    }
    let count = sel.len();
    let d = denom(count);
    let mut grad = vec![T::zero(); x.len()];
    let mut total = 0.0;
    let mut px = vec![0.0; c];
    let mut probs = vec![0.0; c];
    for &i in &sel {
        let (b, p) = (i / hw, i % hw);
        for (ch, v) in px.iter_mut().enumerate() {
            *v = x[(b * c + ch) * hw + p].as_f64();
        }
        let lse = pixel_softmax(&px, &mut probs);
        let y = labels[i] as usize;
        total += lse - px[y];
        for ch in 0..c {
            let onehot = if ch == y { 1.0 } else { 0.0 };
            grad[(b * c + ch) * hw + p] = T::of((probs[ch] - onehot) / d as f64);
        }
    }
    let value = if d == 0 { 0.0 } else { total / d as f64 };
    Ok((g.scalar_fn(logits, value, grad)?, count))
}

/// Supervised cross-entropy and the number of pixels it averaged over.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub var: Var,
    pub valid_pixels: usize,
}

impl CrossEntropy {
    /// No labeled pixel contributed; the loss is defined as 0.
    pub fn is_empty(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Mean of `-log softmax(logits)[y]` over non-ignore pixels.
///
/// `labels` holds `N*H*W` class indices in batch-major order.
pub fn seg_supervised_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<CrossEntropy> {
    let (var, valid_pixels) = cross_entropy(g, logits, labels, "seg_supervised_loss", |_| true, |k| k)?;
    if valid_pixels == 0 {
        log::warn!("supervised segmentation loss has no labeled pixels; using 0");
    }
    Ok(CrossEntropy { var, valid_pixels })
}

/// Cross-entropy against hard pseudo-labels on pixels with `mask` set,
/// normalized by the full pixel count `N*H*W`.
pub fn seg_consistency_from_pseudo<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    pseudo: &[u8],
    mask: &[bool],
) -> Result<Var> {
    check_numel("seg_consistency_loss", "mask", mask.len(), pseudo.len())?;
    let total = pseudo.len();
    Ok(cross_entropy(g, logits, pseudo, "seg_consistency_loss", |i| mask[i], |_| total)?.0)
}

/// Hard argmax labels of teacher probabilities and their `max prob >= tau` mask.
/// Ties resolve toward the lower class index.
pub fn argmax_with_confidence<T: Scalar>(probs: &Tensor<T>, tau: f64) -> Result<(Vec<u8>, Vec<bool>)> {
    let (n, c, h, w) = probs.dims4()?;
    if c > IGNORE as usize {
        return Err(Error::Config(format!("{c} classes do not fit in a u8 label map")));
    }
    let hw = h * w;
    let d = probs.data();
    let mut labels = vec![0u8; n * hw];
    let mut mask = vec![false; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[b * c * hw + p];
            for ch in 1..c {
                let v = d[(b * c + ch) * hw + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            labels[b * hw + p] = best as u8;
            mask[b * hw + p] = best_v.as_f64() >= tau;
        }
    }
    Ok((labels, mask))
}

/// Consistency between student logits and the teacher's thresholded argmax.
pub fn seg_consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    teacher_probs: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let (labels, mask) = argmax_with_confidence(teacher_probs, tau)?;
    seg_consistency_from_pseudo(g, logits, &labels, &mask)
}

/// Class-balanced binary cross-entropy of probabilities `q` against a 0/1 map `z`.
///
/// `beta` is the positive fraction of each `(image, channel)` plane; positives
/// are weighted by `1 - beta` and negatives by `beta`. The result is the mean
/// over all `N*C*H*W` elements, so planes that are all 0 or all 1 contribute 0.
pub fn bdry_bce_reweighted<T: Scalar>(g: &mut Graph<T>, q: Var, z: &Tensor<T>) -> Result<Var> {
    let (n, c, h, w) = g.value(q).dims4()?;
    check_numel("bdry_bce_reweighted", "boundary map", z.numel(), n * c * h * w)?;
    let hw = h * w;
    let qd = g.value(q).data();
    let zd = z.data();
    let m = (n * c * hw) as f64;
    let mut grad = vec![T::zero(); qd.len()];
    let mut total = 0.0;
    for plane in 0..n * c {
        let r = plane * hw..(plane + 1) * hw;
        let pos = zd[r.clone()].iter().filter(|v| v.as_f64() > 0.5).count();
        let beta = pos as f64 / hw as f64;
        if pos == 0 || pos == hw {
            continue;
        }
        for i in r {
            let raw = qd[i].as_f64();
            let qc = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let inside = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
            if zd[i].as_f64() > 0.5 {
                total -= (1.0 - beta) * qc.ln();
                if inside {
                    grad[i] = T::of(-(1.0 - beta) / qc / m);
                }
            } else {
                total -= beta * (1.0 - qc).ln();
                if inside {
                    grad[i] = T::of(beta / (1.0 - qc) / m);
                }
            }
        }
    }
    g.scalar_fn(q, total / m, grad)
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Config("boundary loss needs at least one head".into()))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// Sum over boundary heads of the reweighted BCE against `z`.
pub fn bdry_supervised_loss<T: Scalar>(g: &mut Graph<T>, heads: &[Var], z: &Tensor<T>) -> Result<Var> {
    let terms = heads
        .iter()
        .map(|&q| bdry_bce_reweighted(g, q, z))
        .collect::<Result<Vec<_>>>()?;
    sum_terms(g, terms)
}

/// `1(q >= tau_bdry)` as a 0/1 tensor.
pub fn threshold_boundaries<T: Scalar>(teacher: &Tensor<T>, tau_bdry: f64) -> Tensor<T> {
    teacher.map(|v| if v.as_f64() >= tau_bdry { T::one() } else { T::zero() })
}

/// Student heads against the teacher's thresholded boundary map.
pub fn bdry_consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[Var],
    teacher: &Tensor<T>,
    tau_bdry: f64,
) -> Result<Var> {
    let z = threshold_boundaries(teacher, tau_bdry);
    bdry_supervised_loss(g, heads, &z)
}

/// Mean absolute difference between the mask gradient map and boundary targets.
pub fn duality_loss<T: Scalar>(g: &mut Graph<T>, q_grad: Var, z: &Tensor<T>) -> Result<Var> {
    let n = g.value(q_grad).numel();
    check_numel("duality_loss", "boundary map", z.numel(), n)?;
    let qd = g.value(q_grad).data();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); n];
    for (i, (&q, &t)) in qd.iter().zip(z.data()).enumerate() {
        let d = q.as_f64() - t.as_f64();
        total += d.abs();
        grad[i] = T::of(if d > 0.0 {
            1.0 / n as f64
        } else if d < 0.0 {
            -1.0 / n as f64
        } else {
            0.0
        });
    }
    g.scalar_fn(q_grad, total / n.max(1) as f64, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    /// `exp(-5 (1 - min(t / 0.15T, 1))^2)`
    Sigmoid15Pct,
    /// `min(t / T, 1)`
    LinearFull,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub kind: RampKind,
    pub total_iters: usize,
    pub target: f64,
}

impl RampSchedule {
    pub fn new(kind: RampKind, total_iters: usize, target: f64) -> Self {
        Self {
            kind,
            total_iters,
            target,
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        let total = self.total_iters.max(1) as f64;
        let t = t as f64;
        match self.kind {
            RampKind::Constant => self.target,
            RampKind::LinearFull => self.target * (t / total).min(1.0),
            RampKind::Sigmoid15Pct => {
                let phase = 1.0 - (t / (0.15 * total)).min(1.0);
                self.target * (-5.0 * phase * phase).exp()
            }
        }
    }
}

/// Coefficients and thresholds of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// overall weight of the unlabeled terms
    pub lambda: f64,
    pub lambda_seg: f64,
    pub lambda_bdry: f64,
    /// segmentation pseudo-label confidence threshold
    pub tau: f64,
    /// boundary pseudo-label threshold
    pub tau_bdry: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_seg: 1.0,
            lambda_bdry: 1.0,
            tau: 0.0,
            tau_bdry: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_seg", self.lambda_seg),
            ("lambda_bdry", self.lambda_bdry),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("tau", self.tau), ("tau_bdry", self.tau_bdry)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Ramp-up curves for the segmentation-consistency and boundary weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub seg: RampSchedule,
    pub bdry: RampSchedule,
}

impl Schedules {
    pub fn new(weights: &LossWeights, total_iters: usize) -> Self {
        Self {
            seg: RampSchedule::new(RampKind::Sigmoid15Pct, total_iters, weights.lambda_seg),
            bdry: RampSchedule::new(RampKind::LinearFull, total_iters, weights.lambda_bdry),
        }
    }
}

/// Individual loss terms; `None` marks a disabled component.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub seg_l: Option<Var>,
    pub bdry_l: Option<Var>,
    pub dual: Option<Var>,
    pub seg_u: Option<Var>,
    pub bdry_u: Option<Var>,
}

/// Per-term values and the weights applied at one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg_l: f64,
    pub bdry_l: f64,
    pub dual: f64,
    pub seg_u: f64,
    pub bdry_u: f64,
    pub w_seg_u: f64,
    pub w_bdry: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "total,seg_l,bdry_l,dual,seg_u,bdry_u,w_seg_u,w_bdry";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.total, self.seg_l, self.bdry_l, self.dual, self.seg_u, self.bdry_u, self.w_seg_u, self.w_bdry
        )
    }
}

/// `[seg_l + w_bdry*bdry_l + dual] + lambda*[w_seg*seg_u + w_bdry*bdry_u]` at iteration `t`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    parts: &LossParts,
    weights: &LossWeights,
    schedules: &Schedules,
    t: usize,
) -> Result<(Var, LossBreakdown)> {
    let w_seg = schedules.seg.value(t);
    let w_bdry = schedules.bdry.value(t);
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let mut bd = LossBreakdown {
        seg_l: val(g, parts.seg_l),
        bdry_l: val(g, parts.bdry_l),
        dual: val(g, parts.dual),
        seg_u: val(g, parts.seg_u),
        bdry_u: val(g, parts.bdry_u),
        w_seg_u: w_seg,
        w_bdry,
        total: 0.0,
    };

    let mut sup = Vec::new();
    sup.extend(parts.seg_l);
    if let Some(b) = parts.bdry_l {
        sup.push(g.scale(b, T::of(w_bdry)));
    }
    sup.extend(parts.dual);
    let mut unsup = Vec::new();
    if let Some(s) = parts.seg_u {
        unsup.push(g.scale(s, T::of(w_seg)));
    }
    if let Some(b) = parts.bdry_u {
        unsup.push(g.scale(b, T::of(w_bdry)));
    }

    let mut total = if sup.is_empty() { None } else { Some(sum_terms(g, sup)?) };
    if !unsup.is_empty() {
        let u = sum_terms(g, unsup)?;
        let u = g.scale(u, T::of(weights.lambda));
        total = Some(match total {
            Some(s) => g.add(s, u)?,
            None => u,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss term is enabled".into()))?;
    bd.total = g.value(total).data()[0].as_f64();
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn value(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn ce_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 4, 2, 2]));
        let l = seg_supervised_loss(&mut g, x, &[0, 1, 2, 3]).unwrap();
        approx(value(&g, l.var), 4f64.ln(), 1e-12);

        let x = g.param(Tensor::from_fn(&[1, 2, 1, 2], |i| if i < 2 { 60.0 } else { -60.0 }));
        let l = seg_supervised_loss(&mut g, x, &[0, 0]).unwrap();
        assert!(value(&g, l.var) < 1e-40);
    }

    #[test]
    fn ce_empty_is_zero_and_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 3, 1, 2], 0.5));
        let l = seg_supervised_loss(&mut g, x, &[IGNORE, IGNORE]).unwrap();
        assert!(l.is_empty());
        assert_eq!(value(&g, l.var), 0.0);
        g.backward(l.var).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(seg_supervised_loss(&mut g, x, &[2]).is_err());
        assert!(seg_supervised_loss(&mut g, x, &[0, 0]).is_err());
    }

    #[test]
    fn consistency_masked_out_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2, 2, 2]));
        let teacher = Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 0.9 } else { 0.1 });
        let l = seg_consistency_loss(&mut g, x, &teacher, 0.95).unwrap();
        assert_eq!(value(&g, l), 0.0);
        // tau = 0 keeps every pixel
        let l = seg_consistency_loss(&mut g, x, &teacher, 0.0).unwrap();
        approx(value(&g, l), 2f64.ln(), 1e-12);
    }

    #[test]
    fn consistency_normalizes_by_all_pixels() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2, 1, 4]));
        let l = seg_consistency_from_pseudo(&mut g, x, &[0, 1, 0, 1], &[true, false, false, false]).unwrap();
        approx(value(&g, l), 2f64.ln() / 4.0, 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::new(vec![1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        let (labels, mask) = argmax_with_confidence(&p, 0.5).unwrap();
        assert_eq!(labels, vec![0, 2]);
        assert_eq!(mask, vec![false, true]);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::full(&[1, 1, 1, 2], 0.5));
        let z = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let l = bdry_bce_reweighted(&mut g, q, &z).unwrap();
        approx(value(&g, l), 0.5 * 2f64.ln(), 1e-12);

        let q = g.param(Tensor::full(&[2, 2, 3, 3], 0.3));
        for fill in [0.0, 1.0] {
            let z = Tensor::full(&[2, 2, 3, 3], fill);
            let l = bdry_bce_reweighted(&mut g, q, &z).unwrap();
            assert_eq!(value(&g, l), 0.0);
        }
    }

    #[test]
    fn bce_vanishes_as_q_approaches_z() {
        let z = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut prev = f64::INFINITY;
        for e in [1e-1, 1e-2, 1e-3, 1e-5] {
            let mut g = Graph::<f64>::new();
            let q = g.param(z.map(|v| if v > 0.5 { 1.0 - e } else { e }));
            let l = bdry_bce_reweighted(&mut g, q, &z).unwrap();
            let l = value(&g, l);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn multi_head_is_sum() {
        let mut g = Graph::<f64>::new();
        let qv = Tensor::from_fn(&[1, 2, 2, 2], |i| 0.1 + 0.1 * i as f64);
        let z = Tensor::from_fn(&[1, 2, 2, 2], |i| (i % 3 == 0) as u8 as f64);
        let q1 = g.param(qv.clone());
        let q2 = g.param(qv.clone());
        let q3 = g.param(qv);
        let single = bdry_bce_reweighted(&mut g, q1, &z).unwrap();
        let multi = bdry_supervised_loss(&mut g, &[q1, q2, q3], &z).unwrap();
        approx(value(&g, multi), 3.0 * value(&g, single), 1e-12);
        assert!(bdry_supervised_loss(&mut g, &[], &z).is_err());
    }

    #[test]
    fn bdry_consistency_all_below_threshold_is_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::full(&[1, 2, 2, 2], 0.7));
        let teacher = Tensor::full(&[1, 2, 2, 2], 0.4);
        let l = bdry_consistency_loss(&mut g, &[q], &teacher, 0.5).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn duality_examples() {
        let mut g = Graph::<f64>::new();
        let z = Tensor::from_fn(&[1, 1, 2, 4], |i| (i < 3) as u8 as f64);
        let q = g.param(z.clone());
        let l = duality_loss(&mut g, q, &z).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let q0 = g.param(Tensor::zeros(&[1, 1, 2, 4]));
        let l = duality_loss(&mut g, q0, &z).unwrap();
        assert_eq!(value(&g, l), 3.0 / 8.0);
    }

    #[test]
    fn ramps() {
        let s = RampSchedule::new(RampKind::Sigmoid15Pct, 1000, 2.0);
        assert_eq!(s.value(150), 2.0);
        assert_eq!(s.value(999), 2.0);
        approx(s.value(0), 2.0 * (-5f64).exp(), 1e-15);
        let l = RampSchedule::new(RampKind::LinearFull, 1000, 3.0);
        assert_eq!(l.value(500), 1.5);
        assert_eq!(l.value(0), 0.0);
        assert_eq!(RampSchedule::new(RampKind::Constant, 10, 0.7).value(3), 0.7);
        for sch in [s, l] {
            let mut prev = 0.0;
            for t in 0..=1200 {
                let v = sch.value(t);
                assert!(v >= prev && v <= sch.target);
                prev = v;
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>, v: f64| g.param(Tensor::scalar(v));
        let parts = LossParts {
            seg_l: Some(mk(&mut g, 1.0)),
            bdry_l: Some(mk(&mut g, 2.0)),
            dual: Some(mk(&mut g, 0.5)),
            seg_u: Some(mk(&mut g, 4.0)),
            bdry_u: Some(mk(&mut g, 8.0)),
        };
        let weights = LossWeights {
            lambda: 0.5,
            ..Default::default()
        };
        let sch = Schedules::new(&weights, 100);
        let (t, bd) = total_loss(&mut g, &parts, &weights, &sch, 50).unwrap();
        // w_seg = 1 at t >= 15, w_bdry = 0.5
        let expected = (1.0 + 0.5 * 2.0 + 0.5) + 0.5 * (4.0 + 0.5 * 8.0);
        approx(value(&g, t), expected, 1e-12);
        assert_eq!(bd.total, value(&g, t));
        assert_eq!(bd.w_bdry, 0.5);

        let samth = LossParts {
            seg_l: parts.seg_l,
            seg_u: parts.seg_u,
            ..Default::default()
        };
        let (t, bd) = total_loss(&mut g, &samth, &weights, &sch, 50).unwrap();
        approx(value(&g, t), 1.0 + 0.5 * 4.0, 1e-12);
        assert_eq!((bd.bdry_l, bd.dual, bd.bdry_u), (0.0, 0.0, 0.0));
        assert!(total_loss(&mut g, &LossParts::default(), &weights, &sch, 0).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            tau_bdry: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
