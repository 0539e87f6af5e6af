//! Segmentation and boundary evaluation: mIoU, Boundary IoU, Boundary F1 and MF-ODS.
//!
//! Boundary bands follow `BD_k(y) = y XOR MinPool_k(y)` with a stride-1 k×k
//! min-pool padded with ones, so the image frame never counts as an object
//! edge. Tolerant matching for BF1 and MF-ODS dilates the counterpart with a
//! zero-padded k×k max-pool. Pixels whose ground truth is the ignore label are
//! removed from both prediction and ground truth before any band is built.

use serde::{Deserialize, Serialize};

use crate::boundary_gt::{BoundaryTarget, LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Band kernel size for a 5 pixel radius.
pub const DEFAULT_K: usize = 11;

/// Per-class values and their mean over the classes that count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

impl ClassScores {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self { per_class, mean }
    }
}

fn check_pairs(pred: &[LabelMap], gt: &[LabelMap]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth maps",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
    }
    Ok(())
}

/// Confusion-matrix IoU per class; pixels with `ignore` ground truth are skipped.
pub fn miou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, ignore: u8) -> Result<ClassScores> {
    check_pairs(pred, gt)?;
    let mut inter = vec![0u64; num_classes];
    let mut pred_n = vec![0u64; num_classes];
    let mut gt_n = vec![0u64; num_classes];
    for (p, g) in pred.iter().zip(gt) {
        for (&pl, &gl) in p.labels.iter().zip(&g.labels) {
            if gl == ignore {
                continue;
            }
            if (pl as usize) < num_classes {
                pred_n[pl as usize] += 1;
            }
            if (gl as usize) < num_classes {
                gt_n[gl as usize] += 1;
                if pl == gl {
                    inter[gl as usize] += 1;
                }
            }
        }
    }
    let per_class = (0..num_classes)
        .map(|c| {
            let union = pred_n[c] + gt_n[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect();
    Ok(ClassScores::from_per_class(per_class))
}

/// Separable k×k window reduction with constant padding.
fn pool(mask: &[u8], h: usize, w: usize, k: usize, pad: u8, reduce: fn(u8, u8) -> u8) -> Vec<u8> {
    let r = k / 2;
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = if x < r || x + r >= w { pad } else { mask[y * w + x] };
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                acc = reduce(acc, mask[y * w + xx]);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = if y < r || y + r >= h { pad } else { rows[y * w + x] };
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                acc = reduce(acc, rows[yy * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// k×k erosion with the frame treated as foreground.
pub fn min_pool(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
    pool(mask, h, w, k, 1, u8::min)
}

/// k×k dilation with the frame treated as background.
pub fn max_pool(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
    pool(mask, h, w, k, 0, u8::max)
}

/// `mask XOR MinPool_k(mask)`: the inner ring of width (k-1)/2.
pub fn boundary_band(mask: &[u8], h: usize, w: usize, k: usize) -> Result<Vec<u8>> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("band kernel k={k} must be odd")));
    }
    if mask.len() != h * w {
        return Err(Error::Data(format!("mask of {} pixels for {h}x{w}", mask.len())));
    }
    let eroded = min_pool(mask, h, w, k);
    Ok(mask.iter().zip(&eroded).map(|(&m, &e)| m ^ e).collect())
}

/// One-hot masks of class `c` for prediction and ground truth, ignore pixels cleared.
fn class_masks(p: &LabelMap, g: &LabelMap, c: usize) -> (Vec<u8>, Vec<u8>) {
    let valid = |gl: u8| gl != IGNORE;
    let pm = p
        .labels
        .iter()
        .zip(&g.labels)
        .map(|(&pl, &gl)| (valid(gl) && pl as usize == c) as u8)
        .collect();
    let gm = g
        .labels
        .iter()
        .map(|&gl| (valid(gl) && gl as usize == c) as u8)
        .collect();
    (pm, gm)
}

/// Boundary IoU per class; classes with an empty ground-truth band are excluded.
pub fn boundary_iou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, k: usize) -> Result<ClassScores> {
    check_pairs(pred, gt)?;
    let mut num = vec![0u64; num_classes];
    let mut den = vec![0u64; num_classes];
    let mut band_n = vec![0u64; num_classes];
    for (p, g) in pred.iter().zip(gt) {
        let (h, w) = (g.height, g.width);
        for c in 0..num_classes {
            let (pm, gm) = class_masks(p, g, c);
            let band = boundary_band(&gm, h, w, k)?;
            for i in 0..h * w {
                if band[i] == 1 {
                    band_n[c] += 1;
                    num[c] += (pm[i] & gm[i]) as u64;
                    den[c] += (pm[i] | gm[i]) as u64;
                }
            }
        }
    }
    let per_class = (0..num_classes)
        .map(|c| (band_n[c] > 0).then(|| num[c] as f64 / den[c] as f64))
        .collect();
    Ok(ClassScores::from_per_class(per_class))
}

/// Tolerant precision/recall tallies for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    /// predicted boundary pixels within tolerance of a true one
    pub pred_matched: u64,
    pub pred_total: u64,
    /// true boundary pixels within tolerance of a predicted one
    pub gt_matched: u64,
    pub gt_total: u64,
}

impl MatchCounts {
    pub fn accumulate(&mut self, pred_b: &[u8], gt_b: &[u8], h: usize, w: usize, k: usize) {
        let gt_d = max_pool(gt_b, h, w, k);
        let pred_d = max_pool(pred_b, h, w, k);
        for i in 0..h * w {
            self.pred_matched += (pred_b[i] & gt_d[i]) as u64;
            self.pred_total += pred_b[i] as u64;
            self.gt_matched += (pred_d[i] & gt_b[i]) as u64;
            self.gt_total += gt_b[i] as u64;
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.pred_matched, self.pred_total)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.gt_matched, self.gt_total)
    }

    /// Harmonic mean of precision and recall, `None` when neither side has pixels.
    pub fn f1(&self) -> Option<f64> {
        if self.pred_total == 0 && self.gt_total == 0 {
            return None;
        }
        let (p, r) = (self.precision(), self.recall());
        Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Boundary F1 per class with a k×k matching tolerance.
pub fn boundary_f1(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, k: usize) -> Result<ClassScores> {
    check_pairs(pred, gt)?;
    let mut counts = vec![MatchCounts::default(); num_classes];
    for (p, g) in pred.iter().zip(gt) {
        let (h, w) = (g.height, g.width);
        for (c, cnt) in counts.iter_mut().enumerate() {
            let (pm, gm) = class_masks(p, g, c);
            let pb = boundary_band(&pm, h, w, k)?;
            let gb = boundary_band(&gm, h, w, k)?;
            cnt.accumulate(&pb, &gb, h, w, k);
        }
    }
    Ok(ClassScores::from_per_class(
        counts.iter().map(MatchCounts::f1).collect(),
    ))
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// Mean F-measure at each threshold and its maximum over thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfOds {
    /// `(threshold, mean F over classes)`
    pub curve: Vec<(f64, f64)>,
    pub ods: f64,
    pub best_threshold: f64,
}

/// Dataset-scale boundary F-measure.
///
/// `probs[i]` holds boundary probabilities shaped `[C, H, W]` (or `[1, C, H, W]`)
/// for ground truth `gts[i]`. Counts accumulate over the whole dataset per
/// class before F is formed.
pub fn mf_ods(probs: &[Tensor<f32>], gts: &[BoundaryTarget], thresholds: &[f64], k: usize) -> Result<MfOds> {
    if probs.is_empty() || gts.is_empty() {
        return Err(Error::Data("MF-ODS needs at least one image".into()));
    }
    if probs.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} boundary predictions for {} targets",
            probs.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("MF-ODS needs at least one threshold".into()));
    }
    for (p, g) in probs.iter().zip(gts) {
        if p.numel() != g.data.len() {
            return Err(Error::Data(format!(
                "boundary prediction of {} values for a {}x{}x{} target",
                p.numel(),
                g.channels,
                g.height,
                g.width
            )));
        }
    }
    let channels = gts[0].channels;
    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut counts = vec![MatchCounts::default(); channels];
        for (p, g) in probs.iter().zip(gts) {
            let hw = g.height * g.width;
            for (c, cnt) in counts.iter_mut().enumerate() {
                let pb: Vec<u8> = p.data()[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 >= t) as u8)
                    .collect();
                cnt.accumulate(&pb, g.channel(c), g.height, g.width, k);
            }
        }
        let fs: Vec<f64> = counts.iter().filter_map(MatchCounts::f1).collect();
        let mf = if fs.is_empty() {
            0.0
        } else {
            fs.iter().sum::<f64>() / fs.len() as f64
        };
        curve.push((t, mf));
    }
    let (best_threshold, ods) =
        curve.iter().copied().fold(
            (thresholds[0], f64::NEG_INFINITY),
            |acc, (t, f)| if f > acc.1 { (t, f) } else { acc },
        );
    Ok(MfOds {
        curve,
        ods,
        best_threshold,
    })
}

/// Which metrics an evaluation pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub miou: bool,
    pub biou: bool,
    pub bf1: bool,
    pub mf: bool,
}

impl MetricSet {
    pub const NAMES: [&'static str; 4] = ["miou", "biou", "bf1", "mf"];

    pub fn all() -> Self {
        Self {
            miou: true,
            biou: true,
            bf1: true,
            mf: true,
        }
    }

    /// Parse a comma separated list such as `miou,bf1`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = Self {
            miou: false,
            biou: false,
            bf1: false,
            mf: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "miou" => set.miou = true,
                "biou" => set.biou = true,
                "bf1" => set.bf1 = true,
                "mf" => set.mf = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown metric '{other}'; valid names: {}",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(set)
    }
}

/// Results of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub iou: Option<ClassScores>,
    pub biou: Option<ClassScores>,
    pub bf1: Option<ClassScores>,
    pub mf_ods: Option<MfOds>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn compute(
        pred: &[LabelMap],
        gt: &[LabelMap],
        num_classes: usize,
        k: usize,
        set: MetricSet,
        boundaries: Option<(&[Tensor<f32>], &[BoundaryTarget])>,
    ) -> Result<Self> {
        Ok(Self {
            k,
            iou: set.miou.then(|| miou(pred, gt, num_classes, IGNORE)).transpose()?,
            biou: set.biou.then(|| boundary_iou(pred, gt, num_classes, k)).transpose()?,
            bf1: set.bf1.then(|| boundary_f1(pred, gt, num_classes, k)).transpose()?,
            mf_ods: match (set.mf, boundaries) {
                (true, Some((p, g))) => Some(mf_ods(p, g, &default_thresholds(), k)?),
                _ => None,
            },
        })
    }

    pub fn miou(&self) -> Option<f64> {
        self.iou.as_ref().and_then(|s| s.mean)
    }

    pub fn mean_biou(&self) -> Option<f64> {
        self.biou.as_ref().and_then(|s| s.mean)
    }

    pub fn mean_bf1(&self) -> Option<f64> {
        self.bf1.as_ref().and_then(|s| s.mean)
    }

    pub fn mf(&self) -> Option<f64> {
        self.mf_ods.as_ref().map(|m| m.ods)
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut cols = vec!["miou".to_string(), "biou".into(), "bf1".into(), "mf_ods".into()];
        cols.extend((0..num_classes).map(|c| format!("iou_{c}")));
        cols.join(",")
    }

    pub fn csv_row(&self, num_classes: usize) -> String {
        let mut cols = vec![
            fmt_opt(self.miou()),
            fmt_opt(self.mean_biou()),
            fmt_opt(self.mean_bf1()),
            fmt_opt(self.mf()),
        ];
        for c in 0..num_classes {
            cols.push(fmt_opt(
                self.iou.as_ref().and_then(|s| s.per_class.get(c).copied().flatten()),
            ));
        }
        cols.join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
